"""
Exact O(T) linear algebra for symmetric tridiagonal matrices.

Every precision matrix in the model is symmetric tridiagonal, so the whole
inference engine only needs the handful of kernels in this module: a
Thomas solve, a 1-banded Cholesky factorization, the Takahashi recursion for
the tridiagonal part of the inverse (and its adjoint, used by the
variational gradients), log-determinants and Gaussian sampling.

The numba kernels come in two flavours: single vectors and row-batched
arrays (one independent system per row). Batched kernels parallelise over
rows only, so results never depend on the worker count.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    # try omp before tbb (avoids a noisy version probe); any layer works for row-parallel kernels
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

__all__ = [
    "SymTridiagonal",
    "BandedCholeskyFactor",
    "InverseSubset",
    "SingularMatrixError",
    "NotPositiveDefiniteError",
    "thomas_solve",
    "thomas_solve_batch",
    "cholesky_banded_batch",
    "sparse_inverse_subset_batch",
    "cholesky_banded",
    "sparse_inverse_subset",
    "log_det",
    "sample_gaussian",
    "sample_gaussian_rows",
    "tridiag_quadform",
    "tridiag_matvec",
    "tridiag_trace_product",
    "takahashi_adjoint",
]

PIVOT_RTOL = 1e-14


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when the Thomas elimination hits a (near) zero pivot."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive."""


@dataclass(frozen=True)
class SymTridiagonal:
    """Symmetric tridiagonal matrix stored as its main and first off-diagonal."""

    diag: np.ndarray
    off: np.ndarray

    def __post_init__(self):
        diag = np.ascontiguousarray(self.diag, dtype=np.float64)
        off = np.ascontiguousarray(self.off, dtype=np.float64)
        if diag.ndim != 1 or off.ndim != 1:
            raise ValueError("diag and off must be vectors")
        if diag.shape[0] < 1 or off.shape[0] != diag.shape[0] - 1:
            raise ValueError("off must have exactly one element fewer than diag")
        object.__setattr__(self, "diag", diag)
        object.__setattr__(self, "off", off)

    @property
    def T(self) -> int:
        return self.diag.shape[0]

    def to_dense(self) -> np.ndarray:
        Q = np.diag(self.diag)
        if self.T > 1:
            Q += np.diag(self.off, 1) + np.diag(self.off, -1)
        return Q

    def scaled(self, c: float) -> "SymTridiagonal":
        return SymTridiagonal(self.diag * c, self.off * c)

    def __add__(self, other: "SymTridiagonal") -> "SymTridiagonal":
        return SymTridiagonal(self.diag + other.diag, self.off + other.off)


@dataclass(frozen=True)
class BandedCholeskyFactor:
    """Lower bidiagonal factor L with Q = L L^T.

    ``ldiag`` holds L[j, j] and ``lsub`` holds L[j+1, j].
    """

    ldiag: np.ndarray
    lsub: np.ndarray

    def __post_init__(self):
        ldiag = np.ascontiguousarray(self.ldiag, dtype=np.float64)
        lsub = np.ascontiguousarray(self.lsub, dtype=np.float64)
        if ldiag.ndim != 1 or lsub.ndim != 1 or lsub.shape[0] != ldiag.shape[0] - 1:
            raise ValueError("lsub must have exactly one element fewer than ldiag")
        if not np.all(ldiag > 0):
            raise NotPositiveDefiniteError("factor diagonal must be strictly positive")
        object.__setattr__(self, "ldiag", ldiag)
        object.__setattr__(self, "lsub", lsub)

    @property
    def T(self) -> int:
        return self.ldiag.shape[0]

    def reconstruct(self) -> SymTridiagonal:
        diag = self.ldiag**2
        diag[1:] += self.lsub**2
        return SymTridiagonal(diag, self.ldiag[:-1] * self.lsub)

    def to_dense(self) -> np.ndarray:
        L = np.diag(self.ldiag)
        if self.T > 1:
            L += np.diag(self.lsub, -1)
        return L


@dataclass(frozen=True)
class InverseSubset:
    """Main and first off-diagonal of Q^{-1}."""

    inv_diag: np.ndarray
    inv_off: np.ndarray


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _thomas(diag, off, b, out, scratch):
    T = diag.shape[0]
    tol = 0.0
    for j in range(T):
        a = abs(diag[j])
        if a > tol:
            tol = a
    tol *= PIVOT_RTOL
    piv = diag[0]
    if abs(piv) <= tol:
        return False
    out[0] = b[0] / piv
    for j in range(1, T):
        scratch[j - 1] = off[j - 1] / piv
        piv = diag[j] - off[j - 1] * scratch[j - 1]
        if abs(piv) <= tol:
            return False
        out[j] = (b[j] - off[j - 1] * out[j - 1]) / piv
    for j in range(T - 2, -1, -1):
        out[j] -= scratch[j] * out[j + 1]
    return True


@numba.njit(cache=True, parallel=True)
def _thomas_batch(diag, off, b, out):
    n = diag.shape[0]
    ok = np.ones(n, dtype=np.bool_)
    for i in numba.prange(n):
        scratch = np.empty(max(diag.shape[1] - 1, 1))
        ok[i] = _thomas(diag[i], off[i], b[i], out[i], scratch)
    return ok


@numba.njit(cache=True)
def _chol(diag, off, ldiag, lsub):
    T = diag.shape[0]
    p = diag[0]
    if not p > 0.0:
        return False
    ldiag[0] = np.sqrt(p)
    for j in range(1, T):
        lsub[j - 1] = off[j - 1] / ldiag[j - 1]
        p = diag[j] - lsub[j - 1] * lsub[j - 1]
        if not p > 0.0:
            return False
        ldiag[j] = np.sqrt(p)
    return True


@numba.njit(cache=True, parallel=True)
def _chol_batch(diag, off, ldiag, lsub):
    n = diag.shape[0]
    ok = np.ones(n, dtype=np.bool_)
    for i in numba.prange(n):
        ok[i] = _chol(diag[i], off[i], ldiag[i], lsub[i])
    return ok


@numba.njit(cache=True)
def _takahashi(ldiag, lsub, inv_diag, inv_off):
    # Sigma L = L^{-T}; reading off the entries on the pattern of L gives
    #   S[T,T] = 1/d_T^2,  S[j,j+1] = -r_j S[j+1,j+1],
    #   S[j,j] = 1/d_j^2 + r_j^2 S[j+1,j+1],  with r_j = l_j / d_j.
    T = ldiag.shape[0]
    inv_diag[T - 1] = 1.0 / (ldiag[T - 1] * ldiag[T - 1])
    for j in range(T - 2, -1, -1):
        r = lsub[j] / ldiag[j]
        nxt = inv_diag[j + 1]
        inv_off[j] = -r * nxt
        inv_diag[j] = 1.0 / (ldiag[j] * ldiag[j]) + r * r * nxt


@numba.njit(cache=True, parallel=True)
def _takahashi_batch(ldiag, lsub, inv_diag, inv_off):
    for i in numba.prange(ldiag.shape[0]):
        _takahashi(ldiag[i], lsub[i], inv_diag[i], inv_off[i])


@numba.njit(cache=True)
def _takahashi_adjoint(ldiag, lsub, inv_diag, g_diag, g_off, bar_d, bar_l):
    T = ldiag.shape[0]
    bs = g_diag.copy()
    for j in range(T - 1):
        d = ldiag[j]
        l = lsub[j]
        r = l / d
        nxt = inv_diag[j + 1]
        bar_d[j] = bs[j] * (-2.0 * (1.0 + l * l * nxt) / (d * d * d)) + g_off[j] * l * nxt / (d * d)
        bar_l[j] = bs[j] * 2.0 * l * nxt / (d * d) - g_off[j] * nxt / d
        bs[j + 1] += bs[j] * r * r - g_off[j] * r
    d = ldiag[T - 1]
    bar_d[T - 1] = bs[T - 1] * (-2.0 / (d * d * d))


@numba.njit(cache=True)
def _back_substitute(ldiag, lsub, rhs, out):
    # solves L^T u = rhs
    T = ldiag.shape[0]
    out[T - 1] = rhs[T - 1] / ldiag[T - 1]
    for j in range(T - 2, -1, -1):
        out[j] = (rhs[j] - lsub[j] * out[j + 1]) / ldiag[j]


@numba.njit(cache=True, parallel=True)
def _back_substitute_batch(ldiag, lsub, rhs, out):
    for i in numba.prange(rhs.shape[0]):
        _back_substitute(ldiag, lsub, rhs[i], out[i])


@numba.njit(cache=True, parallel=True)
def _back_substitute_rows(ldiag, lsub, rhs, out):
    for i in numba.prange(rhs.shape[0]):
        _back_substitute(ldiag[i], lsub[i], rhs[i], out[i])


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def thomas_solve(Q: SymTridiagonal, b) -> np.ndarray:
    """Solve ``Q x = b`` with the Thomas algorithm in O(T)."""
    b = np.ascontiguousarray(b, dtype=np.float64)
    if b.shape != (Q.T,):
        raise ValueError(f"right-hand side must have length {Q.T}")
    out = np.empty(Q.T)
    if not _thomas(Q.diag, Q.off, b, out, np.empty(max(Q.T - 1, 1))):
        raise SingularMatrixError("zero pivot in tridiagonal solve")
    return out


def thomas_solve_batch(diag, off, b) -> np.ndarray:
    """Row-wise Thomas solve: row i solves the system (diag[i], off[i]) x = b[i]."""
    diag = np.ascontiguousarray(diag, dtype=np.float64)
    off = np.ascontiguousarray(off, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    out = np.empty_like(b)
    if b.shape[0] == 0:
        return out
    ok = _thomas_batch(diag, off, b, out)
    if not ok.all():
        raise SingularMatrixError(f"zero pivot in tridiagonal solve (row {int(np.argmin(ok))})")
    return out


def cholesky_banded(Q: SymTridiagonal) -> BandedCholeskyFactor:
    """1-banded Cholesky factor of an SPD tridiagonal matrix."""
    ldiag = np.empty(Q.T)
    lsub = np.empty(Q.T - 1)
    if not _chol(Q.diag, Q.off, ldiag, lsub):
        raise NotPositiveDefiniteError("matrix is not positive definite")
    return BandedCholeskyFactor(ldiag, lsub)


def cholesky_banded_batch(diag, off):
    diag = np.ascontiguousarray(diag, dtype=np.float64)
    off = np.ascontiguousarray(off, dtype=np.float64)
    ldiag = np.empty_like(diag)
    lsub = np.empty_like(off)
    if diag.shape[0] == 0:
        return ldiag, lsub
    ok = _chol_batch(diag, off, ldiag, lsub)
    if not ok.all():
        raise NotPositiveDefiniteError(f"matrix is not positive definite (row {int(np.argmin(ok))})")
    return ldiag, lsub


def sparse_inverse_subset(L: BandedCholeskyFactor) -> InverseSubset:
    """Diagonal and first off-diagonal of (L L^T)^{-1} by the Takahashi recursion."""
    inv_diag = np.empty(L.T)
    inv_off = np.empty(L.T - 1)
    _takahashi(L.ldiag, L.lsub, inv_diag, inv_off)
    return InverseSubset(inv_diag, inv_off)


def sparse_inverse_subset_batch(ldiag, lsub):
    inv_diag = np.empty_like(ldiag)
    inv_off = np.empty_like(lsub)
    if ldiag.shape[0]:
        _takahashi_batch(ldiag, lsub, inv_diag, inv_off)
    return inv_diag, inv_off


def takahashi_adjoint(L: BandedCholeskyFactor, inv_diag, g_diag, g_off):
    """Pull back gradients on the inverse subset to gradients on the factor.

    ``g_diag[j]`` is the derivative of some scalar with respect to
    (Q^{-1})[j, j] and ``g_off[j]`` with respect to (Q^{-1})[j, j+1] (the
    symmetric pair counted once). Returns derivatives with respect to
    ``L.ldiag`` and ``L.lsub``.
    """
    bar_d = np.empty(L.T)
    bar_l = np.empty(L.T - 1)
    _takahashi_adjoint(
        L.ldiag,
        L.lsub,
        np.ascontiguousarray(inv_diag, dtype=np.float64),
        np.ascontiguousarray(g_diag, dtype=np.float64),
        np.ascontiguousarray(g_off, dtype=np.float64),
        bar_d,
        bar_l,
    )
    return bar_d, bar_l


def log_det(L: BandedCholeskyFactor) -> float:
    """log det(L L^T)."""
    return 2.0 * float(np.sum(np.log(L.ldiag)))


def sample_gaussian(L: BandedCholeskyFactor, mean, rng_seed=None, size=None, eps=None) -> np.ndarray:
    """Draw from N(mean, (L L^T)^{-1}) by back-substitution ``L^T u = eps``.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``. ``size``
    draws a (size, T) batch. Passing ``eps`` explicitly bypasses the
    generator (used to pin the standard-normal input).
    """
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), (L.T,))
    if eps is None:
        rng = np.random.default_rng(rng_seed)
        shape = (L.T,) if size is None else (size, L.T)
        eps = rng.standard_normal(shape)
    eps = np.ascontiguousarray(eps, dtype=np.float64)
    out = np.empty_like(eps)
    if eps.ndim == 1:
        _back_substitute(L.ldiag, L.lsub, eps, out)
    else:
        _back_substitute_batch(L.ldiag, L.lsub, eps, out)
    return out + mean


def tridiag_matvec(Q: SymTridiagonal, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    out = Q.diag * v
    out[:-1] += Q.off * v[1:]
    out[1:] += Q.off * v[:-1]
    return out


def tridiag_quadform(Q: SymTridiagonal, v) -> float:
    """v^T Q v in O(T)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (Q.T,):
        raise ValueError(f"vector must have length {Q.T}")
    return float(np.dot(Q.diag, v * v) + 2.0 * np.dot(Q.off, v[:-1] * v[1:]))


def tridiag_trace_product(A_diag, A_off, B_diag, B_off) -> float:
    """tr(A B) for symmetric A, B where at least one is tridiagonal.

    Only the tridiagonal part of the other matrix enters.
    """
    return float(np.dot(A_diag, B_diag) + 2.0 * np.dot(A_off, B_off))


def sample_gaussian_rows(ldiag, lsub, eps) -> np.ndarray:
    """Zero-mean draws where row i uses its own factor: solves L_i^T u_i = eps_i."""
    ldiag = np.ascontiguousarray(ldiag, dtype=np.float64)
    lsub = np.ascontiguousarray(lsub, dtype=np.float64)
    eps = np.ascontiguousarray(eps, dtype=np.float64)
    out = np.empty_like(eps)
    if eps.shape[0]:
        _back_substitute_rows(ldiag, lsub, eps, out)
    return out
