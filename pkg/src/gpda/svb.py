"""
Closed-form variational objective for Gaussian log length-scale fields.

Both SVB targets of the model (the mean-function fields and the common
field R) reduce to maximising, over q(nu) = N(m, (L L^T)^{-1}) with L lower
bidiagonal,

    F(m, L) = lin . m
              - 1/2 sum_{j<T-1} [P_j E exp(nu_j) + N_j E exp(-nu_j)]
              - 1/2 [(m - mu)^T Q (m - mu) + tr(Q Sigma)]
              - sum_j log L[j, j]

with Sigma = (L L^T)^{-1}. The log-normal moments make every term analytic
in m and the tridiagonal part of Sigma, so the gradient with respect to the
factor is obtained by pulling the Sigma-gradient back through the Takahashi
recursion.

Because F depends on Sigma only through its tridiagonal part, the optimal
precision is itself tridiagonal and equals the negative Hessian in m,
H = Q + diag(h). The default ascent direction uses that: a Newton step in m
and a step towards chol(H) for the factor, with a backtracking line search
that only accepts non-decreasing objective values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .banded import (
    BandedCholeskyFactor,
    NotPositiveDefiniteError,
    SymTridiagonal,
    cholesky_banded,
    sparse_inverse_subset,
    takahashi_adjoint,
    thomas_solve,
    tridiag_matvec,
    tridiag_quadform,
)

__all__ = ["SVBProblem", "SVBResult", "objective", "gradient", "ascend"]

_RTOL_GAIN = 1e-13


@dataclass(frozen=True)
class SVBProblem:
    lin: np.ndarray
    P: np.ndarray
    N: np.ndarray
    prior_mean: np.ndarray
    prior_precision: SymTridiagonal

    @property
    def T(self) -> int:
        return self.lin.shape[0]


@dataclass
class SVBResult:
    mean: np.ndarray
    factor: BandedCholeskyFactor
    objective_trace: list = field(default_factory=list)
    grad_norm: float = np.inf
    n_steps: int = 0


def _terms(problem: SVBProblem, m, L: BandedCholeskyFactor):
    inv = sparse_inverse_subset(L)
    s = inv.inv_diag
    EE = np.exp(m[:-1] + 0.5 * s[:-1])
    Ee = np.exp(-m[:-1] + 0.5 * s[:-1])
    return inv, EE, Ee


def _value(problem, m, L, inv, EE, Ee):
    Q = problem.prior_precision
    r = m - problem.prior_mean
    return (
        float(np.dot(problem.lin, m))
        - 0.5 * float(np.dot(problem.P, EE) + np.dot(problem.N, Ee))
        - 0.5 * tridiag_quadform(Q, r)
        - 0.5 * float(np.dot(Q.diag, inv.inv_diag) + 2.0 * np.dot(Q.off, inv.inv_off))
        - float(np.sum(np.log(L.ldiag)))
    )


def objective(problem: SVBProblem, m, L: BandedCholeskyFactor) -> float:
    m = np.asarray(m, dtype=np.float64)
    inv, EE, Ee = _terms(problem, m, L)
    return _value(problem, m, L, inv, EE, Ee)


def _gradient(problem, m, L, inv, EE, Ee):
    Q = problem.prior_precision
    T = problem.T
    g_m = problem.lin - tridiag_matvec(Q, m - problem.prior_mean)
    g_m[:-1] -= 0.5 * (problem.P * EE - problem.N * Ee)
    h = np.zeros(T)
    h[:-1] = 0.5 * (problem.P * EE + problem.N * Ee)
    g_s = -0.5 * h - 0.5 * Q.diag
    g_o = -Q.off
    bar_d, bar_l = takahashi_adjoint(L, inv.inv_diag, g_s, g_o)
    bar_d -= 1.0 / L.ldiag
    return g_m, bar_d, bar_l, h


def gradient(problem: SVBProblem, m, L: BandedCholeskyFactor):
    """Analytic (dF/dm, dF/dL.ldiag, dF/dL.lsub)."""
    m = np.asarray(m, dtype=np.float64)
    inv, EE, Ee = _terms(problem, m, L)
    g_m, g_d, g_l, _ = _gradient(problem, m, L, inv, EE, Ee)
    return g_m, g_d, g_l


def _try_step(problem, m, d, l, dm, dd, dl, t0, f0, max_halvings):
    """Backtracking: returns (m, L, f) of the first non-decreasing candidate or None."""
    t = t0
    spd_failures = 0
    for _ in range(max_halvings):
        d_new = d + t * dd
        if np.all(d_new > 0):
            L_new = BandedCholeskyFactor(d_new, l + t * dl)
            m_new = m + t * dm
            inv, EE, Ee = _terms(problem, m_new, L_new)
            f_new = _value(problem, m_new, L_new, inv, EE, Ee)
            if np.isfinite(f_new) and f_new >= f0:
                return m_new, L_new, f_new, spd_failures
        else:
            spd_failures += 1
        t *= 0.5
    return None, None, None, spd_failures


def ascend(problem: SVBProblem, m0, L0: BandedCholeskyFactor, max_steps: int = 25,
           gtol: float = 1e-6, method: str = "newton", step0: float | None = None,
           max_halvings: int = 30) -> SVBResult:
    """Monotone ascent on F from (m0, L0).

    ``method="newton"`` uses the curvature-matched direction described in the
    module docstring (initial step 1), falling back to the plain gradient
    when it cannot make progress; ``method="gradient"`` is steepest ascent
    with initial step 0.1.
    """
    m = np.array(m0, dtype=np.float64)
    L = L0
    inv, EE, Ee = _terms(problem, m, L)
    f = _value(problem, m, L, inv, EE, Ee)
    result = SVBResult(m, L, [f])
    for step in range(max_steps):
        g_m, g_d, g_l, h = _gradient(problem, m, L, inv, EE, Ee)
        gnorm = max(np.max(np.abs(g_m)), np.max(np.abs(g_d)), np.max(np.abs(g_l), initial=0.0))
        result.grad_norm = float(gnorm)
        if gnorm < gtol:
            break
        accepted = None
        if method == "newton":
            H = problem.prior_precision + SymTridiagonal(h, np.zeros(problem.T - 1))
            try:
                L_star = cholesky_banded(H)
                dm = thomas_solve(H, g_m)
                dd, dl = L_star.ldiag - L.ldiag, L_star.lsub - L.lsub
                # predicted first-order gain; below rounding level of F nothing can be accepted
                gain = float(np.dot(g_m, dm) + np.dot(g_d, dd) + np.dot(g_l, dl))
                if gain < _RTOL_GAIN * max(1.0, abs(f)):
                    break
                accepted = _try_step(problem, m, L.ldiag, L.lsub, dm, dd, dl,
                                     1.0 if step0 is None else step0, f, max_halvings)
            except np.linalg.LinAlgError:
                accepted = None
            if accepted is not None and accepted[0] is None:
                accepted = None
        if accepted is None:
            res = _try_step(problem, m, L.ldiag, L.lsub, g_m, g_d, g_l,
                            0.1 if (step0 is None or method == "newton") else step0, f, max_halvings)
            if res[0] is None:
                if res[3] == max_halvings:
                    raise NotPositiveDefiniteError("SVB step could not keep the variational factor positive definite")
                # no ascent possible at working precision
                break
            accepted = res
        m, L, f = accepted[0], accepted[1], accepted[2]
        inv, EE, Ee = _terms(problem, m, L)
        result.objective_trace.append(f)
        result.n_steps = step + 1
    result.mean, result.factor = m, L
    return result
