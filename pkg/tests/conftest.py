import os

import numpy as np
import pytest

os.environ.setdefault("NUMBA_NUM_THREADS", "8")

from gpda.banded import SymTridiagonal
from gpda.sde import GridSpec
from gpda.state import FunctionalDataset


def random_spd(rng, T, dominance=0.5):
    """Random diagonally dominant SPD tridiagonal matrix."""
    off = rng.normal(size=T - 1)
    rowsum = np.zeros(T)
    rowsum[:-1] += np.abs(off)
    rowsum[1:] += np.abs(off)
    diag = rowsum + rng.uniform(dominance, 2.0, size=T)
    return SymTridiagonal(diag, off)


def random_dataset(rng, T, n, shift=1.0, delta=1.0):
    """Small labeled dataset with a shifted block and both classes present."""
    y = np.zeros(n, dtype=np.int64)
    y[rng.permutation(n)[: max(1, n // 2)]] = 1
    X = rng.normal(size=(n, T))
    X += np.cumsum(rng.normal(scale=0.3, size=(n, T)), axis=1)
    block = slice(T // 3, 2 * T // 3 + 1)
    X[y == 1, block] += shift
    return FunctionalDataset(X, y, GridSpec(T, delta))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def dense_Q_NS(tau, nu, delta):
    """Dense Euler-Maruyama precision B^T D^-1 B; ``nu`` may carry a leading batch axis."""
    nu = np.asarray(nu, dtype=np.float64)
    squeeze = nu.ndim == 1
    nu = np.atleast_2d(nu)
    S, T = nu.shape
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), (S,))
    a = 1.0 - delta * np.exp(-nu[:, :-1])
    d = 2.0 * tau[:, None] * delta * np.exp(-nu[:, :-1])
    B = np.broadcast_to(np.eye(T), (S, T, T)).copy()
    B[:, np.arange(1, T), np.arange(T - 1)] = -a
    dinv = np.concatenate([1.0 / tau[:, None], 1.0 / d], axis=1)
    Q = np.einsum("sji,sj,sjk->sik", B, dinv, B)
    return Q[0] if squeeze else Q


def fitted_state(seed, T=12, n=6, sweeps=2, delta=1.0, pure_cavi=False):
    """A state a couple of sweeps into a fit, so every factor is non-trivial."""
    import warnings

    from gpda.engine import FitOptions, fit

    data = random_dataset(np.random.default_rng(seed), T, n, delta=delta)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        state = fit(data, options=FitOptions(max_sweeps=sweeps, tol=0.0, pure_cavi=pure_cavi))
    return state, data
