"""Train/test splitting and replicate evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .classifier import predict_batch
from .engine import FitOptions, fit
from .metrics import classification_metrics, mcc
from .state import FunctionalDataset, Hyperparams

__all__ = ["stratified_folds", "stratified_holdout", "SplitResult", "run_split"]


def stratified_folds(y, k: int, seed: int = 0):
    """Seeded shuffle, then deal each class round-robin into k folds; returns index arrays."""
    y = np.asarray(y)
    if k < 2 or k > y.shape[0]:
        raise ValueError("need 2 <= folds <= n")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    offset = 0
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        for r, i in enumerate(idx):
            folds[(r + offset) % k].append(int(i))
        offset += idx.size
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def stratified_holdout(y, test_fraction: float, seed: int = 0):
    """(train_idx, test_idx) with each class split in the given proportion."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    test = []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        m = min(idx.size - 1, max(1, int(math.floor(test_fraction * idx.size + 0.5)))) if idx.size > 1 else 0
        test.extend(idx[:m].tolist())
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(y.shape[0]), test)
    return train, test


@dataclass
class SplitResult:
    error: float
    tpr: float
    tnr: float
    mcc: float
    converged: bool
    n_sweeps: int


def run_split(train: FunctionalDataset, test: FunctionalDataset, hyper: Hyperparams, options: FitOptions,
              gamma_star=None, selection_threshold: float = 0.5, predict_kwargs=None) -> SplitResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        state = fit(train, hyper, options)
    pred = predict_batch(test.X, state, **(predict_kwargs or {}))
    m = classification_metrics(pred.predicted_label, test.y)
    sel_mcc = math.nan if gamma_star is None else mcc(state.selected(selection_threshold), gamma_star)
    return SplitResult(m.error_rate, m.tpr, m.tnr, sel_mcc, state.converged, state.n_sweeps)
