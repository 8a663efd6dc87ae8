"""Command-line driver: ``neurovol <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Errors are reported on one line as ``neurovol: error[<kind>]: <message>``.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from . import evaluation as ev
from .checkpoint import load_checkpoint
from .gradcheck import model_gradcheck
from .model import ArchConfig, NumericalError, layer_table, param_count
from .saliency import (
    OcclusionConfig,
    aggregate_heatmaps,
    occlusion_map,
    pass_count,
    render_slices,
    top_regions,
    write_regions_csv,
)
from .tensor_core import ShapeError
from .train import (
    SplitLeakError,
    TrainConfig,
    audit_consumed,
    finetune_three_class,
    hyper_search,
    score,
    train_fold,
    train_three_class_scratch,
)

log = logging.getLogger("neurovol")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
GRADCHECK_TOL = 1e-3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Single serializable source of truth for a run; CLI flags override fields."""

    run_dir: str = "run"
    seed: int = 0
    preset: str = "simple"
    arch: dict = field(default_factory=dict)  # overrides applied to the preset
    train: dict = field(default_factory=dict)  # TrainConfig fields except arch/seed
    synth: dict = field(default_factory=dict)
    occlusion: dict = field(default_factory=dict)
    manifest: str | None = None
    split: str | None = None
    checkpoint: str | None = None
    fold: int = 0
    k: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.arch_config()
        cfg.train_config()
        cfg.synth_config()
        cfg.occlusion_config()
        return cfg

    def arch_config(self) -> ArchConfig:
        try:
            return ArchConfig.preset(self.preset, **self.arch)
        except TypeError as exc:
            raise UsageError(f"bad arch overrides: {exc}") from None

    def train_config(self) -> TrainConfig:
        t = dict(self.train)
        if "arch" in t or "seed" in t:
            raise UsageError("set arch/seed at the top level, not inside 'train'")
        reg = t.pop("reg", {})
        try:
            return TrainConfig.from_dict(
                {**t, "arch": self.arch_config().to_dict(), "reg": reg, "seed": self.seed}
            )
        except TypeError as exc:
            raise UsageError(f"bad train config: {exc}") from None

    def synth_config(self) -> D.SynthConfig:
        return D.SynthConfig.from_dict({"seed": self.seed, **self.synth})

    def occlusion_config(self) -> OcclusionConfig:
        unknown = set(self.occlusion) - set(OcclusionConfig.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown occlusion keys: {sorted(unknown)}")
        return OcclusionConfig(**self.occlusion)

    def resolved(self) -> dict:
        d = asdict(self)
        for key in ("run_dir", "manifest", "split", "checkpoint"):
            if d[key] is not None:
                d[key] = str(Path(d[key]).resolve())
        return d

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, set):
        return sorted(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def _require(value, what: str):
    if value is None:
        raise UsageError(f"{what} is required")
    return value


def _run_dir(cfg: RunConfig) -> Path:
    p = Path(cfg.run_dir)
    p.mkdir(parents=True, exist_ok=True)
    _write_json(p / "run_config.json", cfg.resolved())
    return p


def _load_dataset(cfg: RunConfig, dims) -> D.Dataset:
    manifest = Path(_require(cfg.manifest, "--manifest"))
    return D.Dataset.load(manifest, target_dims=dims)


def _load_fold(cfg: RunConfig) -> D.Fold:
    plan = D.SplitPlan.load(_require(cfg.split, "--split"))
    if not 0 <= cfg.fold < len(plan.folds):
        raise UsageError(f"fold {cfg.fold} outside [0, {len(plan.folds)})")
    return plan.folds[cfg.fold]


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    out = _run_dir(cfg)
    sc = cfg.synth_config()
    volumes, records = D.synth_generate(sc)
    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    for r in records:
        D.write_volume(data_dir / r.path, volumes[r.id])
    D.write_manifest(data_dir / "manifest.csv", records)
    _write_json(data_dir / "synth_config.json", {"synth": sc.to_dict(), "run_config": cfg.resolved()})
    print(f"wrote {len(records)} volumes and {data_dir / 'manifest.csv'}")
    return 0


def cmd_import(cfg: RunConfig, args) -> int:
    """Convert NIfTI files listed in a manifest into a VOL1 store."""
    manifest = Path(_require(cfg.manifest, "--manifest"))
    records = D.read_manifest(manifest)
    out = _run_dir(cfg) / "imported"
    out.mkdir(exist_ok=True)
    converted = []
    for r in records:
        src = Path(r.path)
        if not src.is_absolute():
            src = manifest.parent / src
        vol = D.import_nifti(src)
        if args.resize:
            vol = D.resize_volume(vol, args.resize)
        D.write_volume(out / f"{r.id}.vol", vol)
        converted.append(replace(r, path=f"{r.id}.vol"))
    D.write_manifest(out / "manifest.csv", converted)
    print(f"imported {len(converted)} volumes into {out}")
    return 0


def cmd_split(cfg: RunConfig, args) -> int:
    records = D.read_manifest(_require(cfg.manifest, "--manifest"))
    out = _run_dir(cfg)
    plan = D.make_folds(records, cfg.k, cfg.seed)
    plan.save(out / "split.json")
    print(f"wrote {out / 'split.json'} ({cfg.k} folds)")
    return 0


def _train_outputs(out: Path, stem: str):
    return out / f"{stem}_log.jsonl", out / f"{stem}.nvc", out / f"{stem}_metrics.json"


def _report(result, cfg: RunConfig, metrics_path: Path):
    _write_json(metrics_path, {**result.to_dict(), "run_config": cfg.resolved()})
    t = result.test
    print(
        f"fold {result.fold}: best epoch {result.best_epoch}, test acc {t.get('acc')}, "
        f"F2 {t.get('f2')}, Fisher p {t.get('fisher_p')}"
    )


def cmd_train(cfg: RunConfig, args) -> int:
    tcfg = cfg.train_config()
    dataset = _load_dataset(cfg, tcfg.arch.input_dims)
    fold = _load_fold(cfg)
    out = _run_dir(cfg)
    stem = f"fold{fold.index}_c{tcfg.arch.num_classes}"
    log_path, ckpt, metrics = _train_outputs(out, stem)
    meta = {"run_config": cfg.resolved()}
    if tcfg.arch.num_classes == 3:
        result = train_three_class_scratch(fold, dataset, tcfg, log_path, ckpt, meta)
    else:
        result = train_fold(fold, dataset, tcfg, log_path, ckpt, meta)
    audit_consumed(result, fold)
    _report(result, cfg, metrics)
    return 0


def cmd_finetune(cfg: RunConfig, args) -> int:
    ckpt_in = _require(cfg.checkpoint, "--checkpoint")
    model, _, _ = load_checkpoint(ckpt_in)
    tcfg = replace(cfg.train_config(), arch=model.config)
    dataset = _load_dataset(cfg, model.config.input_dims)
    fold = _load_fold(cfg)
    out = _run_dir(cfg)
    log_path, ckpt, metrics = _train_outputs(out, f"fold{fold.index}_finetune_c3")
    result = finetune_three_class(ckpt_in, fold, dataset, tcfg, log_path, ckpt, {"run_config": cfg.resolved()})
    audit_consumed(result, fold)
    _report(result, cfg, metrics)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    model, _, _ = load_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    dataset = _load_dataset(cfg, model.config.input_dims)
    fold = _load_fold(cfg)
    out = _run_dir(cfg)
    labels = ("NC", "AD") if model.config.num_classes == 2 else D.LABELS
    ids = [i for i in getattr(fold, f"{args.subset}_ids") if dataset.by_id[i].label in labels]
    metrics = score(model, dataset, ids)
    _write_json(out / f"eval_fold{fold.index}_{args.subset}.json", {"metrics": metrics, "run_config": cfg.resolved()})
    print(json.dumps({k: metrics.get(k) for k in ("n", "acc", "pre", "rec", "f2", "fisher_p")}))
    return 0


def cmd_occlude(cfg: RunConfig, args) -> int:
    model, _, _ = load_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    occ = cfg.occlusion_config()
    dataset = _load_dataset(cfg, model.config.input_dims)
    fold = _load_fold(cfg)
    out = _run_dir(cfg)
    target = D.LABELS[occ.target_class]
    ids = [i for i in getattr(fold, f"{args.subset}_ids") if dataset.by_id[i].label == target]
    if not ids:
        raise D.DataError(f"no {target} subjects in the {args.subset} split")
    vols, demos, _ = dataset.batch(ids)
    preds = model.predict_proba(vols, demos).argmax(axis=1)
    correct = [i for i, p in zip(ids, preds) if p == occ.target_class]
    if not correct:
        raise D.DataError(f"no correctly classified {target} subjects to occlude")
    per_subject = pass_count(model.config.input_dims, occ)
    print(f"occluding {len(correct)} subjects x {per_subject} forward passes = {len(correct) * per_subject}")
    sys.stdout.flush()
    maps = [occlusion_map(model, dataset.volumes[i], dataset.by_id[i].demographics(), occ) for i in correct]
    agg = aggregate_heatmaps(maps)
    prov = {"run_config": cfg.resolved(), "subjects": correct}
    agg.save(out / "heatmap.vol", extra=prov)
    write_regions_csv(out / "top_regions.csv", top_regions(agg, fraction=args.top_fraction))
    base = np.mean([dataset.volumes[i] for i in correct], axis=0)
    axis = args.axis
    indices = args.slices or [base.shape[axis] // 2]
    render_slices(agg, base, axis, indices, out / "renders", comment=f"neurovol run {cfg.digest()}")
    print(f"wrote {out / 'heatmap.vol'}, top_regions.csv and {len(indices)} renders")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    arch = cfg.arch_config()
    reports = [model_gradcheck(arch, seed=cfg.seed + s) for s in range(args.seeds)]
    worst = max(r["max_rel_error"] for r in reports)
    report = {"preset": cfg.preset, "max_rel_error": worst, "tolerance": GRADCHECK_TOL, "seeds": reports}
    if args.output:
        _write_json(Path(args.output), {**report, "run_config": cfg.resolved()})
    print(f"gradcheck {cfg.preset}: max relative error {worst:.3e} over {args.seeds} seeds")
    if worst > GRADCHECK_TOL:
        raise NumericalError(f"max relative error {worst:.3e} exceeds {GRADCHECK_TOL}")
    return 0


def format_info(arch: ArchConfig, n_params: int) -> str:
    chain = " -> ".join("x".join(map(str, dims)) for dims in arch.dimension_chain())
    pools = "/".join(f"{w}^3" for _, _, w in arch.stages)
    lines = [
        f"variant: {arch.variant}  classes: {arch.num_classes}",
        f"dimension chain (pools {pools}): {chain}",
        f"flatten width: {arch.flatten_width}  FC1 input width: {arch.fc1_input_width} "
        f"(+{arch.demographic_dim} demographic features)",
        f"FC widths: {'/'.join(map(str, arch.fc_widths))}  keep rates: {'/'.join(map(str, arch.keep_rates))}",
        f"parameters: {n_params}",
        "",
        f"{'layer':<10}{'kind':<32}{'output':<22}{'params':>10}",
    ]
    for name, kind, shape, n in layer_table(arch):
        lines.append(f"{name:<10}{kind:<32}{'x'.join(map(str, shape)):<22}{n:>10}")
    return "\n".join(lines)


def cmd_info(cfg: RunConfig, args) -> int:
    if cfg.checkpoint:
        model, _, _ = load_checkpoint(cfg.checkpoint)
        arch, n = model.config, param_count(model)
    else:
        arch = cfg.arch_config()
        n = sum(row[3] for row in layer_table(arch))
    print(format_info(arch, n))
    return 0


def cmd_fisher(cfg: RunConfig, args) -> int:
    a, b, c, d = args.counts
    print(repr(ev.fisher_exact([[a, b], [c, d]])))
    return 0


def cmd_search(cfg: RunConfig, args) -> int:
    tcfg = cfg.train_config()
    dataset = _load_dataset(cfg, tcfg.arch.input_dims)
    fold = _load_fold(cfg)
    out = _run_dir(cfg)
    ranking = hyper_search(dataset, fold, tcfg, args.betas, args.keep_rates_grid, args.batch_sizes)
    _write_json(out / "search.json", {"ranking": [asdict(r) for r in ranking], "run_config": cfg.resolved()})
    for r in ranking:
        print(f"{r.rank:>3} beta={r.beta} keep={r.keep_rate} batch={r.batch_size} val_f2={r.val_f2} {r.status}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dims(text):
    parts = [int(p) for p in text.replace("x", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected D,H,W")
    return parts


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--run-dir")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=["simple", "complex", "tiny"])
    common.add_argument("--input-dims", type=_dims, help="D,H,W")
    common.add_argument("--keep-rates", type=float, nargs="+")
    common.add_argument("--num-classes", type=int, choices=[2, 3])
    common.add_argument("--manifest")
    common.add_argument("--split")
    common.add_argument("--checkpoint")
    common.add_argument("--fold", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    train_opts = _Parser(add_help=False)
    train_opts.add_argument("--lr", type=float)
    train_opts.add_argument("--batch-size", type=int)
    train_opts.add_argument("--max-epochs", type=int)
    train_opts.add_argument("--stop-train-acc", type=float)
    train_opts.add_argument("--beta-kernel", type=float)
    train_opts.add_argument("--beta-bias", type=float)
    train_opts.add_argument("--no-augment", dest="augment", action="store_false", default=None)

    p = _Parser(prog="neurovol", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--dims", type=_dims)
    s.add_argument("--lesion-radius", type=float)
    s.add_argument("--lesion-delta", type=float)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--counts", type=int, nargs=3, metavar=("NC", "AD", "MCI"))

    s = sub.add_parser("import", parents=[common], help="convert NIfTI volumes to VOL1")
    s.add_argument("--resize", type=_dims)

    s = sub.add_parser("split", parents=[common], help="make k-fold 80/10/10 splits")
    s.add_argument("--k", type=int)

    sub.add_parser("train", parents=[common, train_opts], help="train one fold")
    sub.add_parser("finetune", parents=[common, train_opts], help="2-class -> 3-class transfer")

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint")
    s.add_argument("--subset", choices=["train", "val", "test"], default="test")

    s = sub.add_parser("occlude", parents=[common], help="occlusion heatmap over correct AD subjects")
    s.add_argument("--subset", choices=["train", "val", "test"], default="test")
    s.add_argument("--box-size", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--top-fraction", type=float, default=0.01)
    s.add_argument("--axis", type=int, default=0, choices=[0, 1, 2])
    s.add_argument("--slices", type=int, nargs="*")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--output")

    sub.add_parser("info", parents=[common], help="layer table and dimension chain")

    s = sub.add_parser("fisher", parents=[common], help="two-sided Fisher exact p for [[a,b],[c,d]]")
    s.add_argument("counts", type=int, nargs=4, metavar="N")

    s = sub.add_parser("search", parents=[common, train_opts], help="hyperparameter grid on one fold")
    s.add_argument("--betas", type=float, nargs="+", default=[0.01, 0.05, 0.1, 0.5, 1.0])
    s.add_argument("--grid-keep-rates", dest="keep_rates_grid", type=float, nargs="+", default=[0.15, 0.4, 0.85])
    s.add_argument("--batch-sizes", type=int, nargs="+", default=[8])
    return p


def resolve_config(args) -> RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON: {exc}") from None
    cfg = RunConfig.from_dict(base)
    g = vars(args).get
    for key in ("run_dir", "seed", "preset", "manifest", "split", "checkpoint", "fold", "k"):
        if g(key) is not None:
            setattr(cfg, key, g(key))
    arch = dict(cfg.arch)
    if g("input_dims"):
        arch["input_dims"] = g("input_dims")
    if g("keep_rates"):
        arch["keep_rates"] = g("keep_rates")
    if g("num_classes"):
        arch["num_classes"] = g("num_classes")
    train = dict(cfg.train)
    for key in ("lr", "batch_size", "max_epochs", "stop_train_acc", "augment"):
        if g(key) is not None:
            train[key] = g(key)
    reg = dict(train.get("reg", {}))
    if g("beta_kernel") is not None:
        reg["beta_kernel"] = g("beta_kernel")
    if g("beta_bias") is not None:
        reg["beta_bias"] = g("beta_bias")
    if reg:
        train["reg"] = reg
    synth = dict(cfg.synth)
    for key in ("dims", "lesion_radius", "lesion_delta", "noise_sigma"):
        if g(key) is not None:
            synth[key] = g(key)
    if g("counts"):
        synth["counts"] = dict(zip(D.LABELS, g("counts")))
    occ = dict(cfg.occlusion)
    for key in ("box_size", "stride"):
        if g(key) is not None:
            occ[key] = g(key)
    cfg = replace(cfg, arch=arch, train=train, synth=synth, occlusion=occ)
    return RunConfig.from_dict(asdict(cfg))


COMMANDS = {
    "synth": cmd_synth,
    "import": cmd_import,
    "split": cmd_split,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "occlude": cmd_occlude,
    "gradcheck": cmd_gradcheck,
    "info": cmd_info,
    "fisher": cmd_fisher,
    "search": cmd_search,
}


def _thread_limit():
    """Cap BLAS threads from NEUROVOL_THREADS for the duration of a command."""
    n = os.environ.get("NEUROVOL_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise UsageError(f"NEUROVOL_THREADS must be an integer, got {n!r}") from None
    return threadpool_limits(limits=limit)


def main(argv=None) -> int:
    def fail(kind: str, code: int, msg) -> int:
        print(f"neurovol: error[{kind}]: {' '.join(str(msg).split())}", file=sys.stderr)
        return code

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = resolve_config(args)
        with _thread_limit():
            return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        return fail("usage", EXIT_USAGE, exc)
    except NumericalError as exc:
        return fail("numerical", EXIT_NUMERIC, exc)
    except (D.DataError, ShapeError, SplitLeakError, FileNotFoundError, KeyError) as exc:
        return fail("data", EXIT_DATA, exc)
    except ValueError as exc:
        return fail("usage", EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
