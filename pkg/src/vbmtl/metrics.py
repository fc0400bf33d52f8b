"""Agreement metrics and training objectives for the four tasks.

All correlation-type quantities use population (1/N) moments, so CCC is
bounded in [-1, 1] and never exceeds Pearson's rho in magnitude.
"""
import warnings
from dataclasses import dataclass

import numpy as np

from .diffcore import tensor as T
from .diffcore.tensor import as_tensor


class UndefinedMetricError(ValueError):
    """The metric has a zero denominator for these inputs."""


class AbsentClassWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MomentSummary:
    mean_x: float
    mean_y: float
    var_x: float
    var_y: float
    cov: float

    @classmethod
    def of(cls, x, y):
        x = np.asarray(x, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        if x.shape != y.shape:
            raise ValueError(f"length mismatch: {x.size} vs {y.size}")
        if x.size < 2:
            raise UndefinedMetricError(f"need at least 2 points, got {x.size}")
        mx, my = x.mean(), y.mean()
        dx, dy = x - mx, y - my
        return cls(mx, my, float(dx @ dx) / x.size, float(dy @ dy) / x.size, float(dx @ dy) / x.size)


def ccc(x, y):
    m = MomentSummary.of(x, y)
    denom = m.var_x + m.var_y + (m.mean_x - m.mean_y) ** 2
    if denom <= 0.0:
        raise UndefinedMetricError("CCC undefined: both inputs constant with equal means")
    return 2.0 * m.cov / denom


def pearson(x, y):
    m = MomentSummary.of(x, y)
    if m.var_x <= 0.0 or m.var_y <= 0.0:
        raise UndefinedMetricError("Pearson correlation undefined for a constant input")
    return m.cov / np.sqrt(m.var_x * m.var_y)


def confusion_matrix(true, pred, n_classes):
    true = np.asarray(true, dtype=np.intp).ravel()
    pred = np.asarray(pred, dtype=np.intp).ravel()
    if true.shape != pred.shape:
        raise ValueError(f"length mismatch: {true.size} vs {pred.size}")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} labels must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    return counts


def uar(true, pred, n_classes):
    """Unweighted average recall; classes missing from ``true`` are skipped."""
    counts = confusion_matrix(true, pred, n_classes)
    support = counts.sum(axis=1)
    present = support > 0
    if not present.any():
        raise UndefinedMetricError("UAR undefined for an empty label set")
    if not present.all():
        missing = np.flatnonzero(~present).tolist()
        warnings.warn(f"classes {missing} absent from true labels; UAR averages the rest", AbsentClassWarning, stacklevel=2)
    recall = np.diag(counts)[present] / support[present]
    return float(recall.mean())


def ccc_per_column(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return np.array([ccc(pred[:, j], target[:, j]) for j in range(pred.shape[1])])


def pearson_per_column(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return np.array([pearson(pred[:, j], target[:, j]) for j in range(pred.shape[1])])


def ccc_loss(pred, target):
    """Mean over columns of ``1 - CCC``; differentiable w.r.t. ``pred``."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ValueError(f"ccc_loss needs equal (N, D) shapes, got {pred.shape} and {target.shape}")
    if pred.shape[0] < 2:
        raise UndefinedMetricError(f"ccc_loss needs N >= 2, got {pred.shape[0]}")
    mu_p = T.mean(pred, axis=0, keepdims=True)
    mu_t = T.mean(target, axis=0, keepdims=True)
    dp = pred - mu_p
    dt = target - mu_t
    cov = T.mean(dp * dt, axis=0)
    var_p = T.mean(dp * dp, axis=0)
    var_t = T.mean(dt * dt, axis=0)
    gap = (mu_p - mu_t).reshape(-1)
    denom = var_p + var_t + gap * gap
    if np.any(denom.data <= 0.0):
        cols = np.flatnonzero(denom.data <= 0.0).tolist()
        raise UndefinedMetricError(f"CCC undefined in columns {cols}: constant inputs with equal means")
    return T.mean(1.0 - 2.0 * cov / denom)


def cross_entropy(logits, true):
    logits = as_tensor(logits)
    true = np.asarray(true, dtype=np.intp).ravel()
    if logits.ndim != 2 or logits.shape[0] != true.size:
        raise ValueError(f"cross_entropy: logits {logits.shape} do not match {true.size} labels")
    logp = T.log_softmax(logits, axis=1)
    picked = T.getitem(logp, (np.arange(true.size), true))
    return -T.mean(picked)
