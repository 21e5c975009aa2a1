"""Point-estimate (MAP) steps for the scale / length-scale hyperparameters and perturbations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from .sde import GridSpec, trace_coefficients

__all__ = [
    "OUHyperFit",
    "ou_hyper_objective",
    "fit_ou_hyperparams",
    "perturbation_objective",
    "perturbation_gradient",
    "fit_perturbations",
]


@dataclass(frozen=True)
class OUHyperFit:
    scale: float
    length_scale: float
    clamped: bool


def _log_invgamma(x, A, B):
    return A * np.log(B) - gammaln(A) - (A + 1.0) * np.log(x) - B / x


def _log_lognormal(x, mu, sigma):
    lx = np.log(x)
    return -lx - 0.5 * np.log(2 * np.pi * sigma**2) - 0.5 * ((lx - mu) / sigma) ** 2


def _summaries(M_diag, M_off, delta):
    P, N, K = trace_coefficients(M_diag, M_off, delta)
    return float(np.sum(P)), float(np.sum(N)), float(np.sum(K))


def ou_hyper_objective(log_scale, log_ls, M_diag, M_off, n_fields, grid: GridSpec, A, B, mu, sigma):
    """sum_k E log N(v_k; c, Q_S(scale, ls)^{-1}) + log p(scale) + log p(ls).

    ``M_diag``/``M_off`` is the tridiagonal part of sum_k E[(v_k - c)(v_k - c)^T]
    over ``n_fields`` fields.
    """
    T, delta = grid.T, grid.delta
    Ps, Ns, Ks = _summaries(M_diag, M_off, delta)
    s, lam = np.exp(log_scale), np.exp(log_ls)
    logdet = -T * log_scale - (T - 1) * (np.log(2 * delta) - log_ls)
    trace = (lam * Ps + Ns / lam + Ks) / s
    return (
        n_fields * (0.5 * logdet - 0.5 * T * np.log(2 * np.pi))
        - 0.5 * trace
        + _log_invgamma(s, A, B)
        + _log_lognormal(lam, mu, sigma)
    )


def fit_ou_hyperparams(M_diag, M_off, n_fields, grid: GridSpec, A, B, mu, sigma,
                       xatol: float = 1e-10) -> OUHyperFit:
    """MAP (scale, length-scale) of a stationary OU prior shared by ``n_fields`` fields.

    The scale is profiled out in closed form; the length-scale is found by a
    bounded 1-D search in log space with the stability floor 1.01 * delta.
    """
    T, delta = grid.T, grid.delta
    Ps, Ns, Ks = _summaries(M_diag, M_off, delta)
    shape = 0.5 * n_fields * T + A + 1.0

    def profile_scale(u):
        W = np.exp(u) * Ps + np.exp(-u) * Ns + Ks
        return (0.5 * max(W, 0.0) + B) / shape

    def neg(u):
        return -ou_hyper_objective(np.log(profile_scale(u)), u, M_diag, M_off, n_fields, grid, A, B, mu, sigma)

    lo = np.log(1.01 * delta)
    hi = max(mu + 15.0 * sigma, lo + 5.0)
    res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": xatol})
    u = float(res.x)
    clamped = u - lo < 1e-6
    if clamped:
        u = lo
        warnings.warn("length-scale hit the stability floor 1.01*delta; clamped", RuntimeWarning, stacklevel=2)
    return OUHyperFit(profile_scale(u), float(np.exp(u)), clamped)


def perturbation_objective(zeta, A, B, C, c, T, sigma_sq):
    """1/2 (T-1) zeta - 1/2 c (e^-zeta A + e^zeta B + C) - zeta^2 / (2 sigma_sq)."""
    return 0.5 * (T - 1) * zeta - 0.5 * c * (np.exp(-zeta) * A + np.exp(zeta) * B + C) - zeta**2 / (2 * sigma_sq)


def perturbation_gradient(zeta, A, B, c, T, sigma_sq):
    return 0.5 * (T - 1) - 0.5 * c * (np.exp(zeta) * B - np.exp(-zeta) * A) - zeta / sigma_sq


def fit_perturbations(A, B, c, T, sigma_sq, zeta0=None, tol: float = 1e-8, max_iter: int = 100):
    """Vectorised safeguarded Newton for the strictly concave perturbation objective."""
    A = np.atleast_1d(np.asarray(A, dtype=np.float64))
    B = np.atleast_1d(np.asarray(B, dtype=np.float64))
    z = np.zeros_like(A) if zeta0 is None else np.array(zeta0, dtype=np.float64, copy=True)
    # bracket: g' is decreasing; find lo with g'>0 and hi with g'<0
    lo = np.full_like(A, -1.0)
    hi = np.full_like(A, 1.0)
    for _ in range(200):
        bad = perturbation_gradient(lo, A, B, c, T, sigma_sq) < 0
        if not bad.any():
            break
        lo[bad] *= 2.0
    for _ in range(200):
        bad = perturbation_gradient(hi, A, B, c, T, sigma_sq) > 0
        if not bad.any():
            break
        hi[bad] *= 2.0
    z = np.clip(z, lo, hi)
    for _ in range(max_iter):
        g = perturbation_gradient(z, A, B, c, T, sigma_sq)
        lo = np.where(g > 0, z, lo)
        hi = np.where(g < 0, z, hi)
        h = -0.5 * c * (np.exp(z) * B + np.exp(-z) * A) - 1.0 / sigma_sq
        step = -g / h
        z_new = z + step
        outside = (z_new <= lo) | (z_new >= hi)
        z_new = np.where(outside, 0.5 * (lo + hi), z_new)
        done = np.abs(z_new - z) < tol
        z = z_new
        if done.all():
            break
    return z
