"""
Where does the network look?
============================

Occlusion sensitivity: slide a small box of constant intensity over the
volume and record how much the AD probability drops. Averaging the maps
of correctly classified AD subjects shows which region drives the
decision; on synthetic data it should be the injected lesion.

This runs at 32x32x32 with the full simple preset and takes a minute or
two. How sharply the map localizes depends on the initialization seed:
training stops as soon as the training set is fit, often after one or
two epochs, and some seeds leave stray hot spots outside the lesion.

Images are written to ./demo_output/occlusion as binary PPM files.
"""

from pathlib import Path

import numpy as np

from neurovol.data import SynthConfig, lesion_mask, make_folds, synth_dataset
from neurovol.model import ArchConfig
from neurovol.optimizer import RegConfig
from neurovol.saliency import (OcclusionConfig, aggregate_heatmaps, occlusion_map, pass_count,
                               render_slices, top_regions, top_voxels)
from neurovol.train import TrainConfig, train_fold

synth = SynthConfig(dims=(32, 32, 32), lesion_radius=12, noise_sigma=0.2, counts={"NC": 100, "AD": 100}, seed=0)
dataset = synth_dataset(synth)
fold = make_folds(dataset.records, k=10, seed=0).folds[0]
arch = ArchConfig.preset("simple", input_dims=synth.dims)
result = train_fold(fold, dataset, TrainConfig(arch=arch, reg=RegConfig(1e-2, 1e-2), lr=1e-3, seed=0))
model = result.model
print("epochs:", len(result.history), "test accuracy:", result.test["acc"])

# occlude the test-set AD subjects the model gets right
ad = [i for i in fold.test_ids if dataset.by_id[i].label == "AD"]
vols, demos, _ = dataset.batch(ad)
correct = [i for i, p in zip(ad, model.predict_proba(vols, demos).argmax(1)) if p == 1]

config = OcclusionConfig(box_size=2, stride=2)
print(len(correct), "subjects x", pass_count(synth.dims, config), "occlusion positions")

maps = [occlusion_map(model, dataset.volumes[i], dataset.by_id[i].demographics(), config) for i in correct]
heat = aggregate_heatmaps(maps)
print("heat grid:", heat.values.shape, "range", heat.values.min().round(4), heat.values.max().round(4))

# the five hottest boxes, in grid coordinates, and their voxel centres
for z, y, x, h in top_regions(heat, k=5):
    print(f"box ({z},{y},{x}) centre voxel {(2 * z + 0.5, 2 * y + 0.5, 2 * x + 0.5)} heat {h:.4f}")

inside = lesion_mask(synth)
top = top_voxels(heat, 0.01)
print(f"top 1% voxels inside the lesion: {inside[tuple(top.T)].mean():.0%}")

out = Path("demo_output") / "occlusion"
base = np.mean([dataset.volumes[i] for i in correct], axis=0)
for path in render_slices(heat, base, axis=0, indices=[8, 12, 16], out_dir=out):
    print("wrote", path)
