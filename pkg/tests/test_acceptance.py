"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line; the lines are printed as the
test runs and again in the terminal summary. Run just this file with

    pytest tests/test_acceptance.py -v -s
"""
import functools
import itertools
import time
from dataclasses import replace

import numpy as np
import pytest

from neurovol import evaluation as ev
from neurovol import tensor_core as tc
from neurovol.checkpoint import load_checkpoint, save_checkpoint
from neurovol.cli import main as cli_main
from neurovol.data import Fold, SynthConfig, lesion_mask, make_folds, read_volume, synth_dataset, write_volume
from neurovol.evaluation import Confusion
from neurovol.gradcheck import model_gradcheck
from neurovol.model import ArchConfig
from neurovol.optimizer import RegConfig
from neurovol.saliency import OcclusionConfig, aggregate_heatmaps, occlusion_map, render_slices, top_voxels
from neurovol.train import ABLATION_ROWS, TrainConfig, audit_consumed, run_ablation, run_transfer, train_fold

from oracles import conv3d_loops, dense_loops, fisher_enumerate, maxpool3d_loops

pytestmark = pytest.mark.slow

RESULTS = {}

# separable 2-class set used by the end-to-end, localization and hygiene criteria
SEPARABLE = SynthConfig(dims=(32, 32, 32), lesion_radius=12, noise_sigma=0.2, counts={"NC": 100, "AD": 100}, seed=0)
E2E_TRAIN = TrainConfig(
    arch=ArchConfig.preset("simple", input_dims=(32, 32, 32)),
    reg=RegConfig(0.01, 0.01),
    lr=1e-3,
    max_epochs=60,
    seed=0,
)

# cheaper volumes and network for the multi-seed experiments; the lesion is
# centred on the left/right axis so flipped copies keep their class
SMALL_DIMS = (16, 16, 16)
SMALL_ARCH = ArchConfig.preset("simple", input_dims=SMALL_DIMS, stages=[(1, 8, 2), (1, 16, 2)], fc_widths=[32], keep_rates=[0.5])
SMALL_TRAIN = TrainConfig(arch=SMALL_ARCH, reg=RegConfig(0.01, 0.01), lr=3e-3, max_epochs=20, seed=0)
HARD = SynthConfig(dims=SMALL_DIMS, lesion_center=(6, 6, 7.5), lesion_radius=4, lesion_delta=0.5, noise_sigma=0.5, counts={"NC": 140, "AD": 140}, seed=0)
THREE = SynthConfig(dims=SMALL_DIMS, lesion_center=(6, 6, 7.5), lesion_radius=4, lesion_delta=1.0, noise_sigma=0.3, counts={"NC": 100, "AD": 100, "MCI": 100}, seed=0)
N_TRAIN, N_VAL = 30, 10  # per class; every remaining subject is test


def held_out_fold(ds):
    """Small train/val shards and a large test shard, so test scores are not dominated by sampling noise."""
    by_label = {}
    for rec in ds.records:
        by_label.setdefault(rec.label, []).append(rec.id)
    shard = lambda lo, hi: [i for ids in by_label.values() for i in ids[lo:hi]]
    return Fold(0, shard(0, N_TRAIN), shard(N_TRAIN, N_TRAIN + N_VAL), shard(N_TRAIN + N_VAL, None))


def criterion(n, title):
    """Record one PASS/FAIL line for the wrapped test."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            detail, ok = "", False
            try:
                detail = fn(*args, **kwargs) or ""
                ok = True
            except Exception as exc:
                detail = f"{type(exc).__name__}: {' '.join(str(exc).split())[:200]}"
                raise
            finally:
                line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2} {title}: {detail} ({time.perf_counter() - start:.1f}s)"
                RESULTS[n] = line
                print("\n" + line)

        return run

    return wrap


# ---------------------------------------------------------------------------
# shared end-to-end run


@pytest.fixture(scope="module")
def separable():
    ds = synth_dataset(SEPARABLE)
    return ds, make_folds(ds.records, k=10, seed=0)


@pytest.fixture(scope="module")
def e2e(separable):
    ds, plan = separable
    start = time.perf_counter()
    res = train_fold(plan.folds[0], ds, E2E_TRAIN)
    return res, time.perf_counter() - start


# ---------------------------------------------------------------------------


@criterion(1, "gradient check, tiny preset")
def test_c01_gradcheck():
    start = time.perf_counter()
    errs = [model_gradcheck(ArchConfig.preset("tiny"), seed=s)["max_rel_error"] for s in range(5)]
    took = time.perf_counter() - start
    assert max(errs) <= 1e-3, f"max rel error {max(errs):.2e}"
    assert took < 30, f"took {took:.1f}s"
    return f"max rel error {max(errs):.2e} over 5 seeds"


@criterion(2, "kernels vs naive loops")
def test_c02_kernel_oracles():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        B, C, O = rng.integers(1, 3, 3)
        D, H, W = rng.integers(1, 6, 3)
        k = int(rng.choice([1, 3, 5]))
        x = rng.standard_normal((B, C, D, H, W))
        p = tc.ConvParams(rng.standard_normal((O, C, k, k, k)), rng.standard_normal(O))
        worst = max(worst, np.abs(tc.conv3d_forward(x, p) - conv3d_loops(x, p.kernels, p.bias)).max())

        w = int(rng.integers(2, 4))
        x = rng.standard_normal((B, C, *(rng.integers(w, w + 5, 3))))
        out, arg = tc.maxpool3d_forward(x, tc.PoolSpec(w))
        ref, ref_arg = maxpool3d_loops(x, w)
        worst = max(worst, np.abs(out - ref).max())
        assert np.array_equal(arg.indices, ref_arg), "pool argmax differs"

        n_in, n_out = rng.integers(1, 9, 2)
        x = rng.standard_normal((B, n_in))
        wts, b = rng.standard_normal((n_in, n_out)), rng.standard_normal(n_out)
        worst = max(worst, np.abs(tc.dense_forward(x, wts, b) - dense_loops(x, wts, b)).max())
    took = time.perf_counter() - start
    assert worst <= 1e-6, f"max abs diff {worst:.2e}"
    assert took < 60, f"took {took:.1f}s"
    return f"200 shapes, max abs diff {worst:.1e}"


@criterion(3, "dimension chain, complex preset")
def test_c03_dimension_chain(capsys):
    arch = ArchConfig.preset("complex", input_dims=(116, 130, 83))
    assert [w for _, _, w in arch.stages] == [2, 3, 4]
    assert arch.dimension_chain() == [(116, 130, 83), (58, 65, 41), (19, 21, 13), (4, 5, 3)]
    assert arch.flatten_width == 7680 and arch.fc1_input_width == 7682
    assert cli_main(["info", "--preset", "complex"]) == 0
    out = capsys.readouterr().out
    assert "116x130x83 -> 58x65x41 -> 19x21x13 -> 4x5x3" in out and "FC1 input width: 7682" in out
    return "116x130x83 -> 58x65x41 -> 19x21x13 -> 4x5x3, FC1 7682"


@criterion(4, "metric formulas")
def test_c04_metrics():
    f2 = ev.f2_score(0.92, 0.94)
    assert abs(f2 - 0.9359) <= 1e-4, f"F2(0.92, 0.94) = {f2}"
    m = ev.precision_recall_f2(Confusion(tp=7, fp=3, tn=8, fn=2))
    pre, rec = 7 / 10, 7 / 9
    assert m.pre == pre and m.rec == rec and m.acc == 15 / 20
    assert m.f2 == 5 * pre * rec / (4 * pre + rec)
    assert (m.sen, m.spe) == (rec, 8 / 11)
    empty = ev.precision_recall_f2(Confusion(tp=0, fp=0, tn=5, fn=0))
    assert empty.pre is None and empty.rec is None and empty.f2 is None
    assert ev.sensitivity_specificity(Confusion(2, 0, 0, 1))[1] is None
    return f"F2(0.92, 0.94) = {f2:.6f}; undefined cases give None"


@criterion(5, "Fisher exact vs enumeration")
def test_c05_fisher():
    start = time.perf_counter()
    worst = 0.0
    for a, b, c, d in itertools.product(range(21), repeat=4):
        if 1 <= a + b + c + d <= 20:
            t = [[a, b], [c, d]]
            worst = max(worst, abs(ev.fisher_exact(t) - float(fisher_enumerate(t))))
    took = time.perf_counter() - start
    p = ev.fisher_exact([[3, 1], [1, 3]])
    assert abs(p - 34 / 70) <= 1e-10, f"[[3,1],[1,3]] -> {p}"
    assert worst <= 1e-10, f"max abs err {worst:.2e}"
    assert took < 10, f"took {took:.1f}s"
    return f"max abs err {worst:.1e}; [[3,1],[1,3]] = {p:.12f}"


@criterion(6, "end-to-end 2-class learning")
def test_c06_end_to_end(e2e):
    res, took = e2e
    acc, f2 = res.test["acc"], res.test["f2"]
    assert len(res.history) <= 60
    assert acc >= 0.95 and f2 is not None and f2 >= 0.95, f"test acc {acc}, F2 {f2}"
    return f"test acc {acc:.3f}, F2 {f2:.3f}, {len(res.history)} epochs, {took:.0f}s training"


def _ablation_f2(values):
    return float(np.mean([0.0 if v is None else v for v in values]))


@criterion(7, "ablation ordering")
def test_c07_ablation():
    ds = synth_dataset(HARD)
    fold = held_out_fold(ds)
    table = run_ablation(ds, fold, SMALL_TRAIN, seeds=[0, 1, 2])
    means = [_ablation_f2(table[row]) for row in ABLATION_ROWS]
    summary = ", ".join(f"{row} {m:.3f}" for row, m in zip(ABLATION_ROWS, means))
    assert all(len(table[row]) == 3 for row in ABLATION_ROWS)
    assert all(b >= a - 0.02 for a, b in zip(means, means[1:])), summary
    return summary


@criterion(8, "transfer vs scratch")
def test_c08_transfer():
    ds = synth_dataset(THREE)
    fold = held_out_fold(ds)
    accs = run_transfer(ds, fold, SMALL_TRAIN, seeds=range(5))
    tuned, scratch = np.mean(accs["finetune"]), np.mean(accs["scratch"])

    from neurovol.model import forward
    from neurovol.train import finetune_three_class

    two = train_fold(fold, ds, SMALL_TRAIN)
    zero = finetune_three_class((two.model, two.state), fold, ds, replace(SMALL_TRAIN, max_epochs=0))
    vols, demos, _ = ds.batch(ds.ids)
    same = np.array_equal(forward(two.model, vols, demos)[0].argmax(1), forward(zero.model, vols, demos)[0][:, :2].argmax(1))
    summary = f"finetune {tuned:.3f} vs scratch {scratch:.3f}; zero-epoch decisions identical: {same}"
    assert same and tuned >= scratch - 0.02, summary
    return summary


@criterion(9, "occlusion localization")
def test_c09_localization(separable, e2e):
    ds, plan = separable
    res, _ = e2e
    start = time.perf_counter()
    ad = [i for i in plan.folds[0].test_ids if ds.by_id[i].label == "AD"]
    vols, demos, _ = ds.batch(ad)
    correct = [i for i, p in zip(ad, res.model.predict_proba(vols, demos).argmax(1)) if p == 1]
    assert correct, "no correctly classified AD test subjects"
    cfg = OcclusionConfig(box_size=2, stride=2)
    heat = aggregate_heatmaps([occlusion_map(res.model, ds.volumes[i], ds.by_id[i].demographics(), cfg) for i in correct])
    top = top_voxels(heat, 0.01)
    mask = lesion_mask(SEPARABLE)
    inside = float(mask[tuple(top.T)].mean())
    peak_inside = bool(mask[tuple(top[0])])
    took = time.perf_counter() - start
    summary = (
        f"{inside:.1%} of {len(top)} top voxels inside the lesion, peak inside: {peak_inside} "
        f"({len(correct)} subjects, {took:.0f}s)"
    )
    assert inside >= 0.80, summary
    assert took < 600, summary
    return summary


@criterion(10, "determinism and round-trips")
def test_c10_determinism(tmp_path):
    ds = synth_dataset(replace(HARD, counts={"NC": 20, "AD": 20}))
    fold = make_folds(ds.records, k=10, seed=0).folds[0]
    cfg = replace(SMALL_TRAIN, max_epochs=2)
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        res = train_fold(fold, ds, cfg, log_path=d / "log.jsonl", checkpoint_path=d / "m.nvc")
        sid = fold.train_ids[0]
        heat = occlusion_map(res.model, ds.volumes[sid], ds.by_id[sid].demographics(), OcclusionConfig(box_size=2))
        heat.save(d / "heat.vol")
        render_slices(heat, ds.volumes[sid], 0, [8], d / "renders")
        outputs.append({p.relative_to(d): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()})
    assert outputs[0].keys() == outputs[1].keys() and len(outputs[0]) == 5
    for name in outputs[0]:
        assert outputs[0][name] == outputs[1][name], f"{name} differs between runs"

    vol = np.random.default_rng(0).standard_normal((5, 6, 7)).astype(np.float32)
    write_volume(tmp_path / "v.vol", vol)
    assert read_volume(tmp_path / "v.vol").tobytes() == vol.tobytes()
    model, state, meta = load_checkpoint(tmp_path / "a" / "m.nvc")
    save_checkpoint(tmp_path / "again.nvc", model, state, meta)
    assert (tmp_path / "again.nvc").read_bytes() == (tmp_path / "a" / "m.nvc").read_bytes()
    return "checkpoint, log, heatmap and render identical across runs; VOL1 and checkpoint round-trips bit-exact"


@criterion(11, "split hygiene across all folds")
def test_c11_split_hygiene(separable, e2e):
    ds, plan = separable
    res0, _ = e2e
    checked = 0
    for fold in plan.folds:
        res = res0 if fold.index == 0 else train_fold(fold, ds, E2E_TRAIN)
        audit_consumed(res, fold)
        held = set(fold.test_ids)
        assert not {i.split("~")[0] for i in res.consumed_ids} & held
        assert res.consumed_ids == set(fold.train_ids) | {i + "~flip" for i in fold.train_ids}
        checked += 1
    assert checked == 10
    return f"audited {checked} folds; no test id or flipped copy reached a gradient step"
