"""
Linear-chain Ising prior over the binary selection field.

    p(gamma | alpha, beta) = exp(-alpha sum_j gamma_j + beta sum_j gamma_j gamma_{j+1}) / Z

Z is evaluated exactly by a log-space two-state transfer recursion; the same
forward-backward pass yields the chain moments E[sum gamma] and
E[sum gamma_j gamma_{j+1}], i.e. the exact gradient of log Z.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numba
import numpy as np
from scipy import optimize

__all__ = [
    "IsingParams",
    "IsingHyperprior",
    "IsingFitResult",
    "log_partition",
    "chain_moments",
    "expected_log_prior",
    "map_objective",
    "map_update_ising",
]

ALPHA_BOX = (-10.0, 10.0)
BETA_BOX = (0.0, 10.0)
_LOG_BETA_FLOOR = -30.0


@dataclass(frozen=True)
class IsingParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass(frozen=True)
class IsingHyperprior:
    """alpha ~ N(alpha_mean, alpha_sd^2), log beta ~ N(log_beta_mean, log_beta_sd^2).

    A standard deviation of ``None`` means a flat prior on that coordinate
    (alpha itself, or beta itself).
    """

    alpha_mean: float = 0.0
    alpha_sd: float | None = 10.0
    log_beta_mean: float = 0.0
    log_beta_sd: float | None = 1.5

    def log_density(self, alpha, beta):
        out = 0.0
        if self.alpha_sd is not None:
            out += -0.5 * ((alpha - self.alpha_mean) / self.alpha_sd) ** 2
            out -= np.log(self.alpha_sd * np.sqrt(2 * np.pi))
        if self.log_beta_sd is not None:
            if beta <= 0:
                return -np.inf
            lb = np.log(beta)
            out += -0.5 * ((lb - self.log_beta_mean) / self.log_beta_sd) ** 2
            out -= lb + np.log(self.log_beta_sd * np.sqrt(2 * np.pi))
        return out

    def grad(self, alpha, beta):
        """Gradient of log_density in (alpha, beta)."""
        ga = 0.0 if self.alpha_sd is None else -(alpha - self.alpha_mean) / self.alpha_sd**2
        gb = 0.0
        if self.log_beta_sd is not None:
            lb = np.log(beta)
            gb = (-(lb - self.log_beta_mean) / self.log_beta_sd**2 - 1.0) / beta
        return ga, gb


@numba.njit(cache=True)
def _lae(a, b):
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@numba.njit(cache=True)
def _chain_kernel(alpha, beta, T):
    # log-space forward/backward messages; state 1 carries -alpha, pair (1,1) carries beta
    f0 = np.empty(T)
    f1 = np.empty(T)
    f0[0] = 0.0
    f1[0] = -alpha
    for j in range(1, T):
        f0[j] = _lae(f0[j - 1], f1[j - 1])
        f1[j] = -alpha + _lae(f0[j - 1], f1[j - 1] + beta)
    b0 = np.zeros(T)
    b1 = np.zeros(T)
    for j in range(T - 2, -1, -1):
        b0[j] = _lae(b0[j + 1], -alpha + b1[j + 1])
        b1[j] = _lae(b0[j + 1], beta - alpha + b1[j + 1])
    logZ = _lae(f0[T - 1], f1[T - 1])
    m1 = 0.0
    for j in range(T):
        m1 += np.exp(f1[j] + b1[j] - logZ)
    m2 = 0.0
    for j in range(T - 1):
        m2 += np.exp(f1[j] + beta - alpha + b1[j + 1] - logZ)
    return logZ, m1, m2


def log_partition(params: IsingParams, T: int) -> float:
    """log Z(alpha, beta, T) by a log-space transfer-matrix recursion."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return float(_chain_kernel(float(params.alpha), float(params.beta), int(T))[0])


def chain_moments(params: IsingParams, T: int):
    """(log Z, E[sum_j gamma_j], E[sum_j gamma_j gamma_{j+1}]) under the exact prior."""
    if T < 1:
        raise ValueError("T must be >= 1")
    logZ, m1, m2 = _chain_kernel(float(params.alpha), float(params.beta), int(T))
    return float(logZ), float(m1), float(m2)


def expected_log_prior(w, params: IsingParams) -> float:
    """E_q[log p(gamma | alpha, beta)] for q(gamma) = prod_j Bernoulli(w_j)."""
    w = np.asarray(w, dtype=np.float64)
    pair = float(np.dot(w[:-1], w[1:])) if w.shape[0] > 1 else 0.0
    return -params.alpha * float(w.sum()) + params.beta * pair - log_partition(params, w.shape[0])


def map_objective(w, alpha, beta, hyper: IsingHyperprior) -> float:
    return expected_log_prior(w, IsingParams(alpha, beta)) + hyper.log_density(alpha, beta)


@dataclass(frozen=True)
class IsingFitResult:
    params: IsingParams
    converged: bool
    at_bound: bool


def _newton_polish(negobj, x, bounds, steps: int = 8, h: float = 1e-5):
    """A few Newton steps on the analytic gradient (finite-difference Hessian).

    L-BFGS-B stalls on the rounding noise of long chains well before the
    gradient is small; the gradient itself stays accurate, so polish on it.
    """
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    g = negobj(x)[1]
    for _ in range(steps):
        if np.max(np.abs(g)) < 1e-12:
            break
        H = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = h
            H[:, k] = (negobj(x + e)[1] - negobj(x - e)[1]) / (2 * h)
        H = 0.5 * (H + H.T)
        try:
            if np.any(np.linalg.eigvalsh(H) <= 0):
                break
            x_new = np.clip(x - np.linalg.solve(H, g), lo, hi)
        except np.linalg.LinAlgError:
            break
        g_new = negobj(x_new)[1]
        if not np.max(np.abs(g_new)) < np.max(np.abs(g)):
            break
        x, g = x_new, g_new
    return x


def map_update_ising(w, hyper: IsingHyperprior | None = None, init: IsingParams | None = None,
                     tol: float = 1e-6, max_iter: int = 200) -> IsingFitResult:
    """MAP (alpha, beta) for the chain prior given mean-field inclusion probabilities.

    Maximises over (alpha, log beta) with exact gradients; alpha is boxed to
    ALPHA_BOX and beta to BETA_BOX. Hitting a box flags ``at_bound`` and
    warns (e.g. an all-zero field sends alpha to its upper limit).
    """
    hyper = IsingHyperprior() if hyper is None else hyper
    w = np.asarray(w, dtype=np.float64)
    T = w.shape[0]
    s1 = float(w.sum())
    s2 = float(np.dot(w[:-1], w[1:])) if T > 1 else 0.0
    init = IsingParams(2.0, 1.0) if init is None else init

    def negobj(x):
        a, lb = x
        b = np.exp(lb)
        logZ, m1, m2 = chain_moments(IsingParams(a, b), T)
        f = -a * s1 + b * s2 - logZ + hyper.log_density(a, b)
        pa, pb = hyper.grad(a, b)
        ga = -s1 + m1 + pa
        gb = (s2 - m2 + pb) * b
        return -f, -np.array([ga, gb])

    lb_hi = np.log(BETA_BOX[1])
    x0 = np.array([np.clip(init.alpha, *ALPHA_BOX), np.clip(np.log(max(init.beta, 1e-8)), _LOG_BETA_FLOOR, lb_hi)])
    res = optimize.minimize(
        negobj, x0, jac=True, method="L-BFGS-B",
        bounds=[ALPHA_BOX, (_LOG_BETA_FLOOR, lb_hi)],
        options={"maxiter": max_iter, "gtol": 1e-12, "ftol": 1e-15},
    )
    x = _newton_polish(negobj, res.x, [ALPHA_BOX, (_LOG_BETA_FLOOR, lb_hi)])
    a, lb = x
    jac = negobj(x)[1]
    at_bound = bool(
        np.isclose(a, ALPHA_BOX[0], atol=tol) or np.isclose(a, ALPHA_BOX[1], atol=tol)
        or np.isclose(lb, lb_hi, atol=tol) or lb <= _LOG_BETA_FLOOR + tol
    )
    beta = 0.0 if lb <= _LOG_BETA_FLOOR + tol else float(np.exp(lb))
    converged = bool(res.success) or bool(np.max(np.abs(jac)) < 1e-8 * max(1.0, T))
    if at_bound or not converged:
        warnings.warn("Ising MAP update ended at a parameter box or did not converge", RuntimeWarning, stacklevel=2)
    return IsingFitResult(IsingParams(float(a), beta), converged, at_bound)
