"""Training loops: 2-class folds, hyperparameter search, 3-class transfer vs scratch."""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .checkpoint import load_checkpoint, save_checkpoint
from .data import FLIP_SUFFIX, DataError, Dataset, Fold, augment_flip, base_id
from .model import ArchConfig, Model, NumericalError, backward, build_model, expand_head, forward
from .optimizer import AdamState, RegConfig, adam_step, expand_state_head, l2_penalty
from .tensor_core import softmax_cross_entropy

log = logging.getLogger(__name__)

BINARY_LABELS = ("NC", "AD")
AD = 1


class SplitLeakError(AssertionError):
    """A held-out subject reached a gradient step."""


@dataclass
class TrainConfig:
    arch: ArchConfig = field(default_factory=lambda: ArchConfig.preset("simple"))
    reg: RegConfig = field(default_factory=RegConfig)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 60
    stop_train_acc: float = 0.99
    augment: bool = True
    seed: int = 0
    eval_batch: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.stop_train_acc <= 1:
            raise ValueError("stop_train_acc must lie in [0, 1]")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def adam(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        if "arch" in d:
            d["arch"] = ArchConfig.from_dict(d["arch"])
        if "reg" in d:
            d["reg"] = RegConfig(**d["reg"])
        return cls(**d)


@dataclass
class FoldResult:
    fold: int
    num_classes: int
    history: list  # one dict per epoch
    best_epoch: int
    val: dict
    test: dict
    checkpoint_path: str | None = None
    consumed_ids: set = field(default_factory=set, repr=False)
    model: Model | None = field(default=None, repr=False)
    state: AdamState | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "num_classes": self.num_classes,
            "best_epoch": self.best_epoch,
            "history": self.history,
            "val": self.val,
            "test": self.test,
            "checkpoint_path": self.checkpoint_path,
        }


# --------------------------------------------------------------------------
# evaluation helpers


def predict(model: Model, dataset: Dataset, ids, batch: int = 32) -> np.ndarray:
    """Eval-mode class probabilities (float64) for ``ids``, in order."""
    out = []
    for start in range(0, len(ids), batch):
        vols, demos, _ = dataset.batch(ids[start : start + batch])
        out.append(model.predict_proba(vols, demos))
    if not out:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(out)


def score(model: Model, dataset: Dataset, ids, batch: int = 32) -> dict:
    """Metrics for ``ids``: binary (AD positive) for c=2, macro for c=3."""
    c = model.config.num_classes
    probs = predict(model, dataset, ids, batch)
    preds = probs.argmax(axis=1)
    labels = np.array([dataset.by_id[i].class_index for i in ids], dtype=np.int64)
    matrix = ev.confusion_matrix(preds, labels, c)
    out = {"n": len(ids), "confusion_matrix": matrix.tolist()}
    if c == 2:
        conf = ev.confusion_binary(preds, labels, positive_class=AD)
        out.update(ev.precision_recall_f2(conf).to_dict())
        out["confusion"] = asdict(conf)
        out["fisher_p"] = ev.fisher_exact(conf.fisher_table()) if conf.total else None
    else:
        out.update(ev.macro_metrics(matrix).to_dict() if len(ids) else {})
    return out


def _rank_value(x):
    return -1.0 if x is None else x


# --------------------------------------------------------------------------
# training loop


def _fit(
    model: Model,
    state: AdamState,
    dataset: Dataset,
    fold: Fold,
    config: TrainConfig,
    labels: tuple,
    log_path=None,
    checkpoint_path=None,
    meta=None,
) -> FoldResult:
    c = model.config.num_classes
    keep = set(labels)
    train_ids = [i for i in fold.train_ids if dataset.by_id[i].label in keep]
    val_ids = [i for i in fold.val_ids if dataset.by_id[i].label in keep]
    test_ids = [i for i in fold.test_ids if dataset.by_id[i].label in keep]
    forbidden = set(val_ids) | set(test_ids)
    forbidden |= {i + FLIP_SUFFIX for i in forbidden}
    if forbidden & set(train_ids):
        raise SplitLeakError(f"fold {fold.index}: train ids overlap held-out ids")
    missing = keep - {dataset.by_id[i].label for i in train_ids}
    if missing:
        raise DataError(f"fold {fold.index}: no training subjects labelled {', '.join(sorted(missing))}")

    train_set = dataset.subset(train_ids)
    if config.augment:
        train_set = augment_flip(train_set)
    epoch_ids = train_set.ids

    rng = np.random.default_rng([config.seed, fold.index, c])
    shuffle_rng, dropout_rng = rng.spawn(2)
    consumed = set()
    history = []
    best = (-np.inf, -1, model.copy())
    for out in (log_path, checkpoint_path):
        if out:
            Path(out).parent.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = shuffle_rng.permutation(len(epoch_ids))
            losses = []
            for start in range(0, len(order), config.batch_size):
                batch_ids = [epoch_ids[j] for j in order[start : start + config.batch_size]]
                leaked = forbidden.intersection(batch_ids)
                if leaked:
                    raise SplitLeakError(f"held-out ids in gradient step: {sorted(leaked)}")
                consumed.update(batch_ids)
                vols, demos, y = train_set.batch(batch_ids)
                logits, cache = forward(model, vols, demos, mode="train", rng=dropout_rng)
                loss, _, grad_logits = softmax_cross_entropy(logits, y)
                penalty, pgrads = l2_penalty(model, config.reg)
                grads = backward(model, cache, grad_logits.astype(model.dtype))
                for name in grads:
                    grads[name] += pgrads[name]
                adam_step(model.params, grads, state)
                losses.append((loss + penalty) * len(batch_ids))

            train_acc = score(model, train_set, epoch_ids, config.eval_batch)["acc"]
            val = score(model, dataset, val_ids, config.eval_batch)
            row = {
                "epoch": epoch,
                "train_loss": float(np.sum(losses) / len(epoch_ids)),
                "train_acc": train_acc,
                "val_acc": val["acc"],
                "val_f2": val["f2"],
            }
            history.append(row)
            if log_file:
                log_file.write(json.dumps(row) + "\n")
                log_file.flush()
            log.info("fold %d epoch %d %s", fold.index, epoch, row)
            # later epochs win ties
            if _rank_value(val["f2"]) >= best[0]:
                best = (_rank_value(val["f2"]), epoch, model.copy())
            if train_acc >= config.stop_train_acc:
                break
    finally:
        if log_file:
            log_file.close()

    _, best_epoch, best_model = best
    result = FoldResult(
        fold=fold.index,
        num_classes=c,
        history=history,
        best_epoch=best_epoch,
        val=score(best_model, dataset, val_ids, config.eval_batch),
        test=score(best_model, dataset, test_ids, config.eval_batch),
        consumed_ids=consumed,
        model=best_model,
        state=state,
    )
    if checkpoint_path:
        save_checkpoint(checkpoint_path, best_model, state, meta=meta)
        result.checkpoint_path = str(checkpoint_path)
    return result


def train_fold(fold: Fold, dataset: Dataset, config: TrainConfig, log_path=None, checkpoint_path=None, meta=None) -> FoldResult:
    """Train the 2-class (NC vs AD) model on one fold."""
    arch = replace(config.arch, num_classes=2)
    model = build_model(arch, seed=config.seed)
    state = AdamState.for_params(model.params, **config.adam())
    return _fit(model, state, dataset, fold, config, BINARY_LABELS, log_path, checkpoint_path, meta)


def train_three_class_scratch(fold: Fold, dataset: Dataset, config: TrainConfig, log_path=None, checkpoint_path=None, meta=None) -> FoldResult:
    """3-class baseline trained from random initialization."""
    arch = replace(config.arch, num_classes=3)
    model = build_model(arch, seed=config.seed)
    state = AdamState.for_params(model.params, **config.adam())
    return _fit(model, state, dataset, fold, config, ("NC", "AD", "MCI"), log_path, checkpoint_path, meta)


def finetune_three_class(checkpoint, fold: Fold, dataset: Dataset, config: TrainConfig, log_path=None, checkpoint_path=None, meta=None) -> FoldResult:
    """Grow a trained 2-class head to 3 classes and keep training on all classes.

    ``checkpoint`` is a path or a ``(model, adam_state)`` pair. Adam moments
    for the old parameters carry over; the new output column starts at zero.
    Learning-rate hyperparameters come from ``config``.
    """
    if isinstance(checkpoint, (str, Path)):
        model, state, _ = load_checkpoint(checkpoint)
    else:
        model, state = checkpoint
        model = model.copy()
        state = _copy_state(state) if state is not None else None
    if model.config.num_classes != 2:
        raise ValueError(f"checkpoint already has {model.config.num_classes} classes")
    model = expand_head(model, 3, seed=config.seed)
    if state is None:
        state = AdamState.for_params(model.params, **config.adam())
    else:
        state = expand_state_head(state, model.params)
        state.lr, state.beta1, state.beta2, state.eps = config.lr, config.beta1, config.beta2, config.eps
    return _fit(model, state, dataset, fold, config, ("NC", "AD", "MCI"), log_path, checkpoint_path, meta)


def _copy_state(state: AdamState) -> AdamState:
    return replace(
        state,
        m={k: v.copy() for k, v in state.m.items()},
        v={k: v.copy() for k, v in state.v.items()},
    )


# --------------------------------------------------------------------------
# hyperparameter search


@dataclass
class SearchEntry:
    rank: int
    beta: float
    keep_rate: float
    batch_size: int
    val_f2: float | None
    val_acc: float | None
    status: str = "ok"


def hyper_search(dataset: Dataset, fold: Fold, base: TrainConfig, betas, keep_rates, batch_sizes) -> list:
    """Train every grid point on ``fold`` and rank by validation F2.

    Ties fall back to validation accuracy, then grid order. Configurations
    that diverge are ranked last with ``status="diverged"``.
    """
    grid = list(itertools.product(betas, keep_rates, batch_sizes))
    if not grid:
        raise ValueError("empty hyperparameter grid")
    rows = []
    for order, (beta, keep, bs) in enumerate(grid):
        arch = replace(base.arch, keep_rates=[keep] * len(base.arch.fc_widths))
        cfg = replace(base, arch=arch, reg=RegConfig(beta, beta), batch_size=bs)
        try:
            res = train_fold(fold, dataset, cfg)
            rows.append((order, beta, keep, bs, res.val["f2"], res.val["acc"], "ok"))
        except NumericalError as exc:
            log.warning("grid point beta=%s keep=%s batch=%s diverged: %s", beta, keep, bs, exc)
            rows.append((order, beta, keep, bs, None, None, "diverged"))
    rows.sort(key=lambda r: (r[6] != "ok", -_rank_value(r[4]), -_rank_value(r[5]), r[0]))
    return [SearchEntry(rank, *r[1:]) for rank, r in enumerate(rows, start=1)]


# --------------------------------------------------------------------------
# experiments

ABLATION_ROWS = ("bare", "+reg", "+reg+dropout", "+reg+dropout+aug")


def ablation_config(base: TrainConfig, row: str) -> TrainConfig:
    """Strip regularizers from ``base`` down to the named ablation row.

    ``base`` is the full model; earlier rows switch off augmentation,
    then dropout (keep rate 1), then the L2 penalty.
    """
    if row not in ABLATION_ROWS:
        raise ValueError(f"unknown ablation row {row!r}; expected one of {ABLATION_ROWS}")
    level = ABLATION_ROWS.index(row)
    cfg = base
    if level < 3:
        cfg = replace(cfg, augment=False)
    if level < 2:
        cfg = replace(cfg, arch=replace(cfg.arch, keep_rates=[1.0] * len(cfg.arch.fc_widths)))
    if level < 1:
        cfg = replace(cfg, reg=RegConfig())
    return cfg


def run_ablation(dataset: Dataset, fold: Fold, base: TrainConfig, seeds) -> dict:
    """Test F2 for every ablation row and seed: ``{row: [f2 per seed]}``."""
    out = {}
    for row in ABLATION_ROWS:
        cfg = ablation_config(base, row)
        out[row] = [train_fold(fold, dataset, replace(cfg, seed=s)).test["f2"] for s in seeds]
    return out


def run_transfer(dataset: Dataset, fold: Fold, base: TrainConfig, seeds, finetune_epochs=None) -> dict:
    """Paired 3-class runs per seed: scratch vs fine-tuned from a 2-class model.

    Both arms of a pair share the seed and the fold. Returns test accuracy
    lists under ``"scratch"`` and ``"finetune"``.
    """
    out = {"scratch": [], "finetune": []}
    tune = base if finetune_epochs is None else replace(base, max_epochs=finetune_epochs)
    for s in seeds:
        cfg = replace(base, seed=s)
        out["scratch"].append(train_three_class_scratch(fold, dataset, cfg).test["acc"])
        two = train_fold(fold, dataset, cfg)
        out["finetune"].append(finetune_three_class((two.model, two.state), fold, dataset, replace(tune, seed=s)).test["acc"])
    return out


def audit_consumed(result: FoldResult, fold: Fold) -> None:
    """Raise if any validation/test subject (or its flipped copy) was trained on."""
    held_out = set(fold.val_ids) | set(fold.test_ids)
    leaked = {i for i in result.consumed_ids if base_id(i) in held_out}
    if leaked:
        raise SplitLeakError(f"fold {fold.index}: held-out subjects trained on: {sorted(leaked)}")
