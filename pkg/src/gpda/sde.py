"""
Tridiagonal precisions of the Euler-Maruyama discretised OU processes.

The level-1 process with log length-scale field nu follows

    z_{j+1} = a_j z_j + w_{j+1},   a_j = 1 - delta exp(-nu_j),
    Var(w_{j+1}) = 2 tau delta exp(-nu_j),   z_1 ~ N(0, tau),

so Q = B^T D^{-1} B with B unit lower bidiagonal. Written out with
E_j = exp(nu_j) and e_j = exp(-nu_j), the unit-scale precision C = tau Q is

    C[0, 0]     = E_0 / (2 delta) + delta e_0 / 2
    C[j, j]     = (E_{j-1} + E_j) / (2 delta) - 1 + delta e_j / 2   (interior)
    C[T-1, T-1] = E_{T-2} / (2 delta)
    C[j, j+1]   = -E_j / (2 delta) + 1/2

Every entry is affine in single-index exponentials, which is what makes the
expectations under a Gaussian nu closed form (log-normal moments). The last
location's nu never enters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .banded import SymTridiagonal

__all__ = [
    "GridSpec",
    "MomentField",
    "DiscretizationError",
    "build_Q_NS",
    "build_Q_NS_rows",
    "build_Q_S",
    "unit_scale_C_NS",
    "expected_C_NS",
    "expected_C_NS_parts",
    "trace_coefficients",
    "log_det_Q_NS_linear_part",
    "log_det_Q_NS",
    "log_det_Q_S",
]


class DiscretizationError(ValueError):
    """The Euler-Maruyama AR coefficient left (0, 1)."""


@dataclass(frozen=True)
class GridSpec:
    T: int
    delta: float = 1.0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise ValueError("grid needs T >= 2 locations")
        if not self.delta > 0:
            raise ValueError("grid spacing must be positive")


@dataclass(frozen=True)
class MomentField:
    """Posterior means and marginal variances of a Gaussian log length-scale field."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.var) < 0):
            raise ValueError("variances must be non-negative")


def _check_stability(nu, delta):
    steps = delta * np.exp(-np.asarray(nu[:-1]))
    if np.any(steps >= 1.0):
        j = int(np.argmax(steps >= 1.0))
        raise DiscretizationError(
            f"delta * exp(-nu) = {steps[j]:.4g} >= 1 at location {j}; "
            "use a finer grid or raise the length-scale floor"
        )


def _assemble(plus, minus, delta):
    """Unit-scale precision from E_j (``plus``) and e_j (``minus``), j < T-1 used."""
    T = plus.shape[0]
    Ep = plus[:-1] / (2.0 * delta)
    diag = np.zeros(T)
    diag[:-1] += Ep + 0.5 * delta * minus[:-1]
    diag[1:] += Ep
    diag[1:-1] -= 1.0
    off = 0.5 - Ep
    return SymTridiagonal(diag, off)


def unit_scale_C_NS(nu, grid: GridSpec) -> SymTridiagonal:
    """tau * Q_NS(tau, nu), the precision with unit marginal scale."""
    nu = np.asarray(nu, dtype=np.float64)
    if nu.shape != (grid.T,):
        raise ValueError(f"nu must have length {grid.T}")
    _check_stability(nu, grid.delta)
    return _assemble(np.exp(nu), np.exp(-nu), grid.delta)


def build_Q_NS(tau: float, nu, grid: GridSpec) -> SymTridiagonal:
    """Precision of the discretised non-stationary OU process."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return unit_scale_C_NS(nu, grid).scaled(1.0 / tau)


def build_Q_NS_rows(tau: float, nu, grid: GridSpec):
    """Row-batched ``build_Q_NS``: nu is (m, T); returns (diag, off) arrays."""
    nu = np.asarray(nu, dtype=np.float64)
    if nu.ndim != 2 or nu.shape[1] != grid.T:
        raise ValueError(f"nu must have shape (m, {grid.T})")
    if not tau > 0:
        raise ValueError("tau must be positive")
    delta = grid.delta
    if np.any(delta * np.exp(-nu[:, :-1]) >= 1.0):
        raise DiscretizationError("delta * exp(-nu) >= 1; use a finer grid or raise the length-scale floor")
    Ep = np.exp(nu[:, :-1]) / (2.0 * delta)
    diag = np.zeros(nu.shape)
    diag[:, :-1] += Ep + 0.5 * delta * np.exp(-nu[:, :-1])
    diag[:, 1:] += Ep
    diag[:, 1:-1] -= 1.0
    return diag / tau, (0.5 - Ep) / tau


def build_Q_S(tau2: float, lam: float, grid: GridSpec) -> SymTridiagonal:
    """Precision of the discretised stationary OU process (scale tau2, length lam)."""
    if not lam > 0:
        raise ValueError("length-scale must be positive")
    return build_Q_NS(tau2, np.full(grid.T, np.log(lam)), grid)


def expected_C_NS_parts(moments: MomentField, grid: GridSpec):
    """Split E[C_NS(nu + zeta)] into its exp(+zeta), exp(-zeta) and constant parts.

    Returns three ``SymTridiagonal`` matrices (plus, minus, const) such that
    E[C_NS(nu + zeta)] = e^zeta * plus + e^-zeta * minus + const.
    """
    m = np.asarray(moments.mean, dtype=np.float64)
    s = np.asarray(moments.var, dtype=np.float64)
    T, delta = grid.T, grid.delta
    EE = np.exp(m + 0.5 * s)
    Ee = np.exp(-m + 0.5 * s)
    Ep = EE[:-1] / (2.0 * delta)
    p_diag = np.zeros(T)
    p_diag[:-1] += Ep
    p_diag[1:] += Ep
    m_diag = np.zeros(T)
    m_diag[:-1] = 0.5 * delta * Ee[:-1]
    c_diag = np.zeros(T)
    c_diag[1:-1] = -1.0
    return (
        SymTridiagonal(p_diag, -Ep),
        SymTridiagonal(m_diag, np.zeros(T - 1)),
        SymTridiagonal(c_diag, np.full(T - 1, 0.5)),
    )


def expected_C_NS(moments: MomentField, zeta: float, grid: GridSpec) -> SymTridiagonal:
    """E_q[C_NS(nu + zeta)] for nu ~ q with the given marginal moments."""
    plus, minus, const = expected_C_NS_parts(moments, grid)
    return plus.scaled(np.exp(zeta)) + minus.scaled(np.exp(-zeta)) + const


def trace_coefficients(S_diag, S_off, delta):
    """Coefficients of tr(S C_NS(nu)) = sum_j P_j E_j + N_j e_j + K, j < T-1.

    ``S`` is any symmetric matrix (only its tridiagonal part matters).
    Arrays with a leading batch axis are handled row-wise. Returns
    (P, N, K) with P, N of length T-1.
    """
    S_diag = np.asarray(S_diag, dtype=np.float64)
    S_off = np.asarray(S_off, dtype=np.float64)
    P = (S_diag[..., :-1] + S_diag[..., 1:] - 2.0 * S_off) / (2.0 * delta)
    N = 0.5 * delta * S_diag[..., :-1]
    K = S_off.sum(axis=-1) - S_diag[..., 1:-1].sum(axis=-1)
    return P, N, K


def log_det_Q_NS_linear_part(nu_expectation, grid: GridSpec) -> float:
    """The nu-dependent part of log det Q_NS: sum of nu over the first T-1 locations."""
    nu_expectation = np.asarray(nu_expectation, dtype=np.float64)
    return float(np.sum(nu_expectation[: grid.T - 1]))


def log_det_Q_NS(tau: float, nu, grid: GridSpec) -> float:
    """Analytic log det Q_NS = -T log tau - (T-1) log(2 delta) + sum_{j<T-1} nu_j."""
    return (
        -grid.T * np.log(tau)
        - (grid.T - 1) * np.log(2.0 * grid.delta)
        + log_det_Q_NS_linear_part(nu, grid)
    )


def log_det_Q_S(tau2: float, lam: float, grid: GridSpec) -> float:
    return -grid.T * np.log(tau2) - (grid.T - 1) * (np.log(2.0 * grid.delta) - np.log(lam))
