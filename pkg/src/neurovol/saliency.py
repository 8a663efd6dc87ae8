"""Occlusion sensitivity heatmaps for biomarker localization.

Heat at a box position is the drop in target-class probability when the
box is filled with ``fill_value``: positive heat marks regions whose
removal lowers the model's confidence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from numpy.lib.stride_tricks import sliding_window_view

from . import tensor_core as tc
from .data import read_volume, write_volume
from .model import CLASS_INDEX, Model, forward
from .tensor_core import softmax


@dataclass
class OcclusionConfig:
    box_size: int = 1
    stride: int | None = None  # defaults to box_size
    fill_value: float = 0.0
    target_class: int = CLASS_INDEX["AD"]
    batch: int = 32

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.box_size
        if self.box_size < 1 or self.stride < 1:
            raise ValueError(f"box_size and stride must be >= 1: {self}")


@dataclass
class HeatmapVolume:
    values: np.ndarray  # [D', H', W'] probability drops
    box_size: int
    stride: int
    volume_dims: tuple
    subject_count: int = 1

    @property
    def grid_dims(self) -> tuple:
        return self.values.shape

    def cell_box(self, idx) -> tuple:
        """Input-voxel slices covered by heat cell ``idx``."""
        return tuple(slice(i * self.stride, i * self.stride + self.box_size) for i in idx)

    def to_voxels(self, fill=None) -> np.ndarray:
        """Paint every heat cell onto the input voxel grid.

        Voxels covered by several boxes keep the later one; uncovered voxels
        get ``fill`` (default: the heatmap minimum).
        """
        fill = self.values.min() if fill is None else fill
        out = np.full(self.volume_dims, fill, dtype=np.float64)
        for idx in np.ndindex(self.values.shape):
            out[self.cell_box(idx)] = self.values[idx]
        return out

    def metadata(self) -> dict:
        return {
            "grid_dims": list(self.grid_dims),
            "box_size": self.box_size,
            "stride": self.stride,
            "volume_dims": list(self.volume_dims),
            "subject_count": self.subject_count,
        }

    def save(self, path, extra: dict | None = None) -> None:
        """Write ``path`` (VOL1) plus a ``.json`` sidecar with grid metadata."""
        path = Path(path)
        write_volume(path, self.values.astype(np.float32))
        meta = self.metadata()
        if extra:
            meta.update(extra)
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "HeatmapVolume":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        values = read_volume(path).astype(np.float64)
        return cls(values, meta["box_size"], meta["stride"], tuple(meta["volume_dims"]), meta["subject_count"])


def box_positions(dims, box_size: int, stride: int) -> list:
    """Per-axis start offsets of the sliding box."""
    if any(box_size > d for d in dims):
        raise ValueError(f"box of size {box_size} larger than volume {tuple(dims)}")
    return [list(range(0, d - box_size + 1, stride)) for d in dims]


def pass_count(dims, cfg: OcclusionConfig) -> int:
    """Forward passes one full sweep needs (plus one baseline)."""
    return int(np.prod([len(p) for p in box_positions(dims, cfg.box_size, cfg.stride)])) + 1


def _target_prob(model: Model, vols: np.ndarray, demo: np.ndarray, target: int) -> np.ndarray:
    demos = np.repeat(demo[None], len(vols), axis=0)
    logits, _ = forward(model, vols[:, None], demos, mode="eval")
    return softmax(logits.astype(np.float64))[:, target]


class LocalSweep:
    """Eval-mode forward pass that re-evaluates only what an occlusion touches.

    All activations of the intact volume are kept (zero-padded by k//2).
    For an occluded box, each conv layer is recomputed on the box grown by
    k//2 and each pool on the cells its windows overlap; the rest of every
    activation is reused. Runs in double precision.
    """

    def __init__(self, model: Model, volume: np.ndarray, demo: np.ndarray):
        cfg = model.config
        self.P = {k: v.astype(np.float64) for k, v in model.params.items()}
        self.k = cfg.kernel_size
        self.p = p = self.k // 2
        self.demo = np.asarray(demo, dtype=np.float64).reshape(-1)
        self.fc = [f"fc{i + 1}" for i in range(len(cfg.fc_widths))]
        self.ops = []
        for s, (n, _, w) in enumerate(cfg.stages):
            self.ops += [("conv", f"conv{s + 1}.{j + 1}") for j in range(n)]
            self.ops.append(("pool", w))

        pad = ((0, 0), (p, p), (p, p), (p, p))
        act = np.pad(np.asarray(volume, dtype=np.float64)[None], pad)
        self.acts = [act]
        self.dims = [tuple(volume.shape)]
        for op, arg in self.ops:
            dims = self.dims[-1]
            if op == "conv":
                out = self._conv(act, arg, (0, 0, 0), dims)
            else:
                out = self._pool(act, arg, (0, 0, 0), tc.pooled_shape(dims, arg))
                dims = tc.pooled_shape(dims, arg)
            act = np.pad(out, pad)
            self.acts.append(act)
            self.dims.append(dims)
        self.base_logits = self._head()

    def _interior(self, act, lo, hi):
        p = self.p
        return (slice(None),) + tuple(slice(a + p, b + p) for a, b in zip(lo, hi))

    def _conv(self, src, name, lo, hi):
        """ReLU(conv) output on region [lo, hi) of the (unpadded) grid."""
        k = self.k
        crop = src[(slice(None),) + tuple(slice(a, b + 2 * self.p) for a, b in zip(lo, hi))]
        win = sliding_window_view(crop, (k, k, k), axis=(1, 2, 3))
        kern = self.P[f"{name}.kernels"]
        y = np.tensordot(kern, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
        y += self.P[f"{name}.bias"][:, None, None, None]
        return np.maximum(y, 0)

    def _pool(self, src, w, lo, hi):
        """Max over pooled cells [lo, hi)."""
        block = src[self._interior(src, [a * w for a in lo], [b * w for b in hi])]
        C = block.shape[0]
        nd, nh, nw = (b - a for a, b in zip(lo, hi))
        return block.reshape(C, nd, w, nh, w, nw, w).max(axis=(2, 4, 6))

    def _head(self):
        last = self.acts[-1]
        h = np.concatenate([last[self._interior(last, (0, 0, 0), self.dims[-1])].reshape(-1), self.demo])
        for name in self.fc:
            h = np.maximum(h @ self.P[f"{name}.weights"] + self.P[f"{name}.bias"], 0)
        return h @ self.P["out.weights"] + self.P["out.bias"]

    def occluded_logits(self, lo, hi, fill: float) -> np.ndarray:
        saved = []

        def write(i, region_lo, region_hi, values):
            idx = self._interior(self.acts[i], region_lo, region_hi)
            saved.append((i, idx, self.acts[i][idx].copy()))
            self.acts[i][idx] = values

        try:
            write(0, lo, hi, fill)
            for i, (op, arg) in enumerate(self.ops):
                if op == "conv":
                    dims = self.dims[i]
                    lo = tuple(max(a - self.p, 0) for a in lo)
                    hi = tuple(min(b + self.p, d) for b, d in zip(hi, dims))
                    write(i + 1, lo, hi, self._conv(self.acts[i], arg, lo, hi))
                else:
                    lo = tuple(a // arg for a in lo)
                    hi = tuple(min(-(-b // arg), d) for b, d in zip(hi, self.dims[i + 1]))
                    if any(a >= b for a, b in zip(lo, hi)):
                        # change confined to dropped remainder voxels
                        return self.base_logits.copy()
                    write(i + 1, lo, hi, self._pool(self.acts[i], arg, lo, hi))
            return self._head()
        finally:
            for i, idx, old in reversed(saved):
                self.acts[i][idx] = old


def occlusion_map(model: Model, volume, demo, cfg: OcclusionConfig, method: str = "local") -> HeatmapVolume:
    """Sweep the occluding box over ``volume`` and record target-probability drops.

    ``method="local"`` re-evaluates only the receptive field each box touches
    (double precision); ``method="full"`` runs complete batched forward
    passes and serves as the reference.
    """
    volume = np.asarray(volume, dtype=model.dtype)
    dims = tuple(model.config.input_dims)
    if volume.shape != dims:
        raise ValueError(f"volume shape {volume.shape} != model input {dims}")
    demo = np.asarray(getattr(demo, "as_array", lambda: demo)(), dtype=np.float64).reshape(-1)
    pz, py, px = box_positions(dims, cfg.box_size, cfg.stride)
    b = cfg.box_size
    positions = [(z, y, x) for z in pz for y in py for x in px]
    drops = np.empty(len(positions), dtype=np.float64)

    if method == "local":
        sweep = LocalSweep(model, volume, demo)
        baseline = softmax(sweep.base_logits[None])[0, cfg.target_class]
        for n, (z, y, x) in enumerate(positions):
            logits = sweep.occluded_logits((z, y, x), (z + b, y + b, x + b), cfg.fill_value)
            drops[n] = baseline - softmax(logits[None])[0, cfg.target_class]
    elif method == "full":
        demo = demo.astype(model.dtype)
        baseline = _target_prob(model, volume[None], demo, cfg.target_class)[0]
        for start in range(0, len(positions), cfg.batch):
            chunk = positions[start : start + cfg.batch]
            vols = np.repeat(volume[None], len(chunk), axis=0)
            for n, (z, y, x) in enumerate(chunk):
                vols[n, z : z + b, y : y + b, x : x + b] = cfg.fill_value
            drops[start : start + len(chunk)] = baseline - _target_prob(model, vols, demo, cfg.target_class)
    else:
        raise ValueError(f"unknown method {method!r}")

    values = drops.reshape(len(pz), len(py), len(px))
    # an unchanged input gives exactly zero heat
    for n, (z, y, x) in enumerate(positions):
        if np.all(volume[z : z + b, y : y + b, x : x + b] == cfg.fill_value):
            values.reshape(-1)[n] = 0.0
    return HeatmapVolume(values, cfg.box_size, cfg.stride, dims, 1)


def aggregate_heatmaps(heatmaps) -> HeatmapVolume:
    """Voxelwise mean, summed in list order."""
    heatmaps = list(heatmaps)
    if not heatmaps:
        raise ValueError("no heatmaps to aggregate")
    first = heatmaps[0]
    total = np.zeros_like(first.values, dtype=np.float64)
    count = 0
    for h in heatmaps:
        if h.metadata()["grid_dims"] != first.metadata()["grid_dims"] or (
            h.box_size, h.stride, tuple(h.volume_dims)
        ) != (first.box_size, first.stride, tuple(first.volume_dims)):
            raise ValueError("heatmap grids differ")
        total += h.values * h.subject_count
        count += h.subject_count
    return HeatmapVolume(total / count, first.box_size, first.stride, tuple(first.volume_dims), count)


def top_regions(heatmap: HeatmapVolume, k: int | None = None, fraction: float | None = None) -> list:
    """Highest-heat cells as ``(z, y, x, heat)`` rows, ties in scan order."""
    flat = heatmap.values.reshape(-1)
    if (k is None) == (fraction is None):
        raise ValueError("give exactly one of k or fraction")
    if k is None:
        k = max(1, int(round(fraction * flat.size)))
    if not 1 <= k <= flat.size:
        raise ValueError(f"k={k} outside [1, {flat.size}]")
    order = np.argsort(-flat, kind="stable")[:k]
    rows = []
    for i in order:
        z, y, x = np.unravel_index(i, heatmap.values.shape)
        rows.append((int(z), int(y), int(x), float(flat[i])))
    return rows


def top_voxels(heatmap: HeatmapVolume, fraction: float) -> np.ndarray:
    """Input-voxel coordinates ``[n, 3]`` of the top ``fraction`` of painted voxels."""
    vox = heatmap.to_voxels().reshape(-1)
    n = max(1, int(round(fraction * vox.size)))
    order = np.argsort(-vox, kind="stable")[:n]
    return np.stack(np.unravel_index(order, heatmap.volume_dims), axis=1)


def write_regions_csv(path, rows) -> None:
    with open(path, "w") as f:
        f.write("rank,z,y,x,heat\n")
        for rank, (z, y, x, h) in enumerate(rows, start=1):
            f.write(f"{rank},{z},{y},{x},{h!r}\n")


def _to_byte(a: np.ndarray) -> np.ndarray:
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def render_slices(heatmap: HeatmapVolume, base_volume, axis: int, indices, out_dir, prefix="slice", comment=None) -> list:
    """Write binary PPM images: grayscale base slice, heat blended in as red.

    Heat is min-max normalized over the whole map, so the hottest voxel is
    pure red (255, 0, 0) and a flat heatmap leaves the base untouched.
    """
    base = np.asarray(base_volume, dtype=np.float64)
    if base.shape != tuple(heatmap.volume_dims):
        raise ValueError(f"base volume {base.shape} != heatmap volume dims {heatmap.volume_dims}")
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    for i in indices:
        if not 0 <= i < base.shape[axis]:
            raise IndexError(f"slice index {i} outside [0, {base.shape[axis]})")
    heat = heatmap.to_voxels()
    lo, hi = heat.min(), heat.max()
    heat = (heat - lo) / (hi - lo) if hi > lo else np.zeros_like(heat)
    blo, bhi = base.min(), base.max()
    gray = (base - blo) / (bhi - blo) if bhi > blo else np.zeros_like(base)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in indices:
        g = np.take(gray, i, axis=axis)
        h = np.take(heat, i, axis=axis)
        rgb = np.stack([g * (1 - h) + h, g * (1 - h), g * (1 - h)], axis=-1)
        rows, cols = g.shape
        header = b"P6\n"
        if comment:
            header += b"# " + comment.encode() + b"\n"
        header += f"{cols} {rows}\n255\n".encode()
        path = out_dir / f"{prefix}_axis{axis}_{i:03d}.ppm"
        path.write_bytes(header + _to_byte(rgb).tobytes())
        paths.append(path)
    return paths
