"""Classification metrics: confusion matrix, F1 (per class, macro, epoch average),
one-vs-rest ROC/AUC and amplitude histograms."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class DegenerateMetricWarning(UserWarning):
    """A ratio had a zero denominator and was reported as 0."""


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label vectors differ in length: {y_true.shape} vs {y_pred.shape}")
    for name, y in (("true", y_true), ("predicted", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise ValueError(f"{name} labels outside [0, {n_classes})")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


@dataclass
class F1Result:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    degenerate: list[int] = field(default_factory=list)


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    zero = den == 0
    out = np.divide(num, np.where(zero, 1, den), dtype=np.float64)
    out[zero] = 0.0
    return out, zero


def f1_scores(confusion) -> F1Result:
    """One-vs-rest precision, recall and ``F1 = 2PR / (P + R)`` per class.

    Any 0/0 ratio is taken as 0 and its class is listed in ``degenerate``;
    the macro average is the unweighted class mean.
    """
    c = np.asarray(confusion)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or (c < 0).any():
        raise ValueError("confusion matrix must be square and nonnegative")
    tp = np.diag(c).astype(np.float64)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    precision, zp = _ratio(tp, tp + fp)
    recall, zr = _ratio(tp, tp + fn)
    f1, zf = _ratio(2 * precision * recall, precision + recall)
    degenerate = [int(i) for i in np.nonzero(zp | zr | zf)[0]]
    if degenerate:
        warnings.warn(f"F1 undefined for classes {degenerate}; reported as 0",
                      DegenerateMetricWarning, stacklevel=2)
    return F1Result(precision, recall, f1, float(f1.mean()), degenerate)


def f1_from_pr(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def epoch_average_f1(per_epoch_f1) -> float:
    """Mean of the per-epoch macro-F1 values."""
    vals = [float(v) for v in per_epoch_f1]
    if not vals:
        raise ValueError("epoch_average_f1 needs at least one epoch")
    return float(np.mean(vals))


def roc_auc(scores, truth) -> tuple[np.ndarray, np.ndarray, float]:
    """ROC points ``(fpr, tpr)`` and trapezoidal AUC for a binary problem.

    The threshold steps through each distinct score from the highest down;
    tied records cross together, giving a diagonal segment.  The AUC is
    formed from integer counts, so it equals ``P(s+ > s-) + P(s+ = s-)/2``
    exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and truth must be 1-D and equally long")
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative record")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.r_[0, np.cumsum(y)[last]].astype(np.int64)
    fp = np.r_[0, np.cumsum(~y)[last]].astype(np.int64)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = twice_area / (2 * n_pos * n_neg)
    return fp / n_neg, tp / n_pos, auc


def auc_pairwise(scores, truth) -> float:
    """All-pairs statistic ``P(s+ > s-) + P(s+ = s-)/2`` by brute force."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truth).astype(bool)
    pos, neg = s[y], s[~y]
    gt = int((pos[:, None] > neg[None, :]).sum())
    eq = int((pos[:, None] == neg[None, :]).sum())
    return (2 * gt + eq) / (2 * len(pos) * len(neg))


def feature_histogram(values, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width histogram over ``[min, max]``; counts sum to the element count."""
    v = np.asarray(getattr(values, "data", values), dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot histogram an empty tensor")
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        edges = np.linspace(lo, lo + 1.0, n_bins + 1)
        counts = np.zeros(n_bins, dtype=np.int64)
        counts[0] = v.size
        return edges, counts
    counts, edges = np.histogram(v, bins=n_bins, range=(lo, hi))
    return edges, counts.astype(np.int64)


@dataclass
class EvalReport:
    class_names: tuple[str, ...]
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_f1: float
    accuracy: float
    auc: dict[str, float]
    roc: dict[str, tuple[np.ndarray, np.ndarray]]
    degenerate: list[int] = field(default_factory=list)
    epoch_average_f1: float | None = None
    history: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "class_names": list(self.class_names),
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "degenerate_classes": self.degenerate,
            "epoch_average_f1": self.epoch_average_f1,
            "history": self.history,
        }


def evaluate(y_true, probs, class_names) -> EvalReport:
    """Full report from true labels and per-class scores (softmax outputs)."""
    probs = np.asarray(probs, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    n = len(class_names)
    y_pred = np.argmax(probs, axis=1) if len(probs) else np.zeros(0, dtype=np.int64)
    conf = confusion_matrix(y_true, y_pred, n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMetricWarning)
        f = f1_scores(conf)
    auc, roc = {}, {}
    for c, name in enumerate(class_names):
        truth = y_true == c
        if truth.all() or not truth.any():
            continue
        fpr, tpr, a = roc_auc(probs[:, c], truth)
        auc[name] = a
        roc[name] = (fpr, tpr)
    acc = float((y_pred == y_true).mean()) if len(y_true) else 0.0
    return EvalReport(tuple(class_names), conf, f.precision, f.recall, f.f1, f.macro_f1, acc,
                      auc, roc, f.degenerate)
