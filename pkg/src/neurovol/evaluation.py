"""Classification metrics and Fisher's exact test.

Metrics whose denominator is zero are reported as ``None`` (the undefined
marker) rather than 0, so they cannot silently drag down fold averages.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np


@dataclass
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def fisher_table(self):
        """2x2 table of true class (AD, NC) against predicted class (AD, NC)."""
        return [[self.tp, self.fn], [self.fp, self.tn]]


@dataclass
class Metrics:
    acc: float | None = None
    pre: float | None = None
    rec: float | None = None
    f2: float | None = None
    sen: float | None = None
    spe: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den):
    return None if den == 0 else num / den


def f2_score(pre, rec):
    # zero recall forces F2 = 0 for any precision, defined or not
    if rec == 0:
        return 0.0
    if pre is None or rec is None:
        return None
    den = 4 * pre + rec
    if den == 0:
        return 0.0
    return 5 * pre * rec / den


def confusion_binary(preds, labels, positive_class=1) -> Confusion:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} predictions vs {labels.shape} labels")
    p = preds == positive_class
    t = labels == positive_class
    return Confusion(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        tn=int(np.sum(~p & ~t)),
        fn=int(np.sum(~p & t)),
    )


def precision_recall_f2(conf: Confusion) -> Metrics:
    pre = _ratio(conf.tp, conf.tp + conf.fp)
    rec = _ratio(conf.tp, conf.tp + conf.fn)
    sen, spe = sensitivity_specificity(conf)
    return Metrics(
        acc=_ratio(conf.tp + conf.tn, conf.total),
        pre=pre,
        rec=rec,
        f2=f2_score(pre, rec),
        sen=sen,
        spe=spe,
    )


def sensitivity_specificity(conf: Confusion):
    return _ratio(conf.tp, conf.tp + conf.fn), _ratio(conf.tn, conf.tn + conf.fp)


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(mat, (labels, preds), 1)
    return mat


def macro_metrics(matrix) -> Metrics:
    """Accuracy plus one-vs-rest precision/recall/F2, macro-averaged over classes.

    Classes whose precision or recall is undefined are left out of the
    corresponding average (with a warning).
    """
    m = np.asarray(matrix, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise ValueError(f"expected a non-empty square matrix, got shape {m.shape}")
    total = int(m.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    pres, recs, f2s = [], [], []
    for c in range(m.shape[0]):
        tp = int(m[c, c])
        fp = int(m[:, c].sum()) - tp
        fn = int(m[c, :].sum()) - tp
        pre, rec = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        if pre is None or rec is None:
            warnings.warn(f"class {c}: undefined precision/recall excluded from macro average")
        if pre is not None:
            pres.append(pre)
        if rec is not None:
            recs.append(rec)
        f2 = f2_score(pre, rec)
        if f2 is not None:
            f2s.append(f2)

    def mean(xs):
        return float(np.mean(xs)) if xs else None

    return Metrics(acc=float(np.trace(m)) / total, pre=mean(pres), rec=mean(recs), f2=mean(f2s))


def _log_hypergeom(a, row1, col1, n):
    """log P(top-left = a) for a 2x2 table with the given margins."""
    b = row1 - a
    c = col1 - a
    d = n - row1 - col1 + a
    lf = math.lgamma
    return (
        lf(row1 + 1) + lf(n - row1 + 1) + lf(col1 + 1) + lf(n - col1 + 1)
        - lf(n + 1) - lf(a + 1) - lf(b + 1) - lf(c + 1) - lf(d + 1)
    )


def fisher_exact(table) -> float:
    """Two-sided p-value of Fisher's exact test on a 2x2 table.

    Sums the probabilities of every margin-preserving table that is no more
    likely than the observed one (relative slack 1e-7 for float ties).
    """
    t = np.asarray(table, dtype=np.int64)
    if t.shape != (2, 2):
        raise ValueError(f"expected a 2x2 table, got shape {t.shape}")
    if np.any(t < 0):
        raise ValueError("table counts must be non-negative")
    n = int(t.sum())
    if n == 0:
        raise ValueError("all-zero table")
    row1 = int(t[0].sum())
    col1 = int(t[:, 0].sum())
    lo = max(0, row1 + col1 - n)
    hi = min(row1, col1)
    if lo == hi:
        return 1.0
    logp = np.array([_log_hypergeom(a, row1, col1, n) for a in range(lo, hi + 1)])
    observed = logp[int(t[0, 0]) - lo]
    keep = logp <= observed + math.log1p(1e-7)
    # factor out the largest term before exponentiating
    top = logp.max()
    total = np.exp(logp - top).sum()
    p = np.exp(logp[keep] - top).sum() / total
    return float(min(1.0, p))
