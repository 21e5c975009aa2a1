"""Classification and variable-selection metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["ConfusionCounts", "confusion", "ClassificationMetrics", "classification_metrics", "mcc"]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(v, name):
    v = np.asarray(v)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    if not np.all((v == 0) | (v == 1)):
        raise ValueError(f"{name} must be binary")
    return v.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _binary(pred, "pred"), _binary(truth, "truth")
    if p.shape != t.shape:
        raise ValueError("pred and truth differ in length")
    return ConfusionCounts(
        tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)), fn=int(np.sum(~p & t)), tn=int(np.sum(~p & ~t))
    )


@dataclass(frozen=True)
class ClassificationMetrics:
    error_rate: float
    tpr: float
    tnr: float
    undefined: tuple = ()

    def __iter__(self):
        return iter((self.error_rate, self.tpr, self.tnr))


def _ratio(num, den):
    return num / den if den else math.nan


def classification_metrics(pred, truth) -> ClassificationMetrics:
    """Error rate, true positive rate, true negative rate.

    Rates with an empty denominator are NaN and named in ``undefined``.
    """
    c = confusion(pred, truth)
    if c.total == 0:
        raise ValueError("need at least one item")
    undefined = tuple(name for name, den in (("tpr", c.tp + c.fn), ("tnr", c.tn + c.fp)) if den == 0)
    return ClassificationMetrics(
        (c.fp + c.fn) / c.total, _ratio(c.tp, c.tp + c.fn), _ratio(c.tn, c.tn + c.fp), undefined
    )


def mcc(selected, gamma_star) -> float:
    """Matthews correlation; 0 when any marginal count is zero."""
    c = confusion(selected, gamma_star)
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)
