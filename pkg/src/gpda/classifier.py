"""Predictive class probabilities for new spectra under a fitted model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .banded import cholesky_banded_batch, sparse_inverse_subset_batch, thomas_solve_batch
from .engine import LOG2PI, _R_exponential_moments, _latent_prior_precision
from .mapfit import fit_perturbations
from .sde import trace_coefficients
from .state import EMPTY, ModelState

__all__ = [
    "Prediction",
    "PredictionBatch",
    "qda_score",
    "map_update_zeta_new",
    "predict",
    "predict_batch",
    "predictive_elbo",
]


@dataclass(frozen=True)
class Prediction:
    xi1: float
    predicted_label: int
    qda_score: float
    z_mean: np.ndarray
    zeta_new: float


@dataclass(frozen=True)
class PredictionBatch:
    xi1: np.ndarray
    predicted_label: np.ndarray
    qda_score: np.ndarray
    z_mean: np.ndarray
    zeta_new: np.ndarray
    n_rounds: np.ndarray

    def __len__(self):
        return self.xi1.shape[0]

    def __getitem__(self, i) -> Prediction:
        return Prediction(float(self.xi1[i]), int(self.predicted_label[i]), float(self.qda_score[i]),
                          self.z_mean[i], float(self.zeta_new[i]))


def _check_model(model: ModelState, X):
    if model.n_sweeps < 1:
        raise ValueError("model has not been fitted")
    X = np.asarray(X, dtype=np.float64)
    squeeze = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.T:
        raise ValueError(f"new observation has length {X.shape[1]}, model has T={model.T}")
    if not np.all(np.isfinite(X)):
        raise ValueError("new observation contains non-finite values")
    return X, squeeze


def qda_score(x_new, model: ModelState, z_mean) -> np.ndarray | float:
    """sum_j w_j [Einv_1j (x - m_1 - m_z)_j^2 - Einv_0j (x - m_0 - m_z)_j^2]."""
    x = np.asarray(x_new, dtype=np.float64)
    Einv = model.q_sigma.mean_inv
    r1 = x - model.q_mu[1].mean - z_mean
    r0 = x - model.q_mu[0].mean - z_mean
    s = (model.w * (Einv[1] * r1 * r1 - Einv[0] * r0 * r0)).sum(axis=-1)
    return float(s) if np.ndim(s) == 0 else s


def _perturbation_terms(model: ModelState, z_mean, inv_diag, inv_off):
    S_diag = z_mean * z_mean + inv_diag
    S_off = z_mean[:, :-1] * z_mean[:, 1:] + inv_off
    P, N, _ = trace_coefficients(S_diag, S_off, model.grid.delta)
    EE, Ee = _R_exponential_moments(model)
    return N @ Ee, P @ EE


def map_update_zeta_new(model: ModelState, z_mean, inv_diag, inv_off, zeta0=None):
    """MAP perturbation for new observations given their current q(z) moments (row-batched)."""
    z_mean, inv_diag, inv_off = (np.atleast_2d(a) for a in (z_mean, inv_diag, inv_off))
    A, B = _perturbation_terms(model, z_mean, inv_diag, inv_off)
    return fit_perturbations(A, B, model.q_tau.mean_inv, model.T, model.hyper.sigma_zeta_sq, zeta0=zeta0)


def _latent_step(model, X, xi, zeta):
    w = model.w
    Einv = model.q_sigma.mean_inv
    e1 = w * xi[:, None] * Einv[1]
    e0 = w * (1.0 - xi[:, None]) * Einv[0]
    ee = (1.0 - w) * Einv[EMPTY]
    diag, off = _latent_prior_precision(model, zeta)
    diag = diag + e1 + e0 + ee
    rhs = e1 * (X - model.q_mu[1].mean) + e0 * (X - model.q_mu[0].mean) + ee * (X - model.q_mu[EMPTY].mean)
    mean = thomas_solve_batch(diag, off, rhs)
    ld, ls = cholesky_banded_batch(diag, off)
    inv_d, inv_o = sparse_inverse_subset_batch(ld, ls)
    return mean, ld, inv_d, inv_o


def _xi_step(model, X, z_mean, z_var):
    w = model.w
    n0, n1 = model.class_counts
    El = model.q_sigma.mean_log
    Einv = model.q_sigma.mean_inv
    qda = qda_score(X, model, z_mean)
    logvar = float(np.dot(w, El[1] - El[0]))
    tr1 = (w * Einv[1] * (model.q_mu[1].inv_diag + z_var)).sum(axis=1)
    tr0 = (w * Einv[0] * (model.q_mu[0].inv_diag + z_var)).sum(axis=1)
    logit = -0.5 * logvar - 0.5 * qda - 0.5 * tr1 + 0.5 * tr0 + np.log(n1 / n0)
    return expit(logit), np.atleast_1d(qda)


def predictive_elbo(model: ModelState, X, xi, z_mean, ldiag, inv_diag, inv_off, zeta) -> np.ndarray:
    """Row-wise ELBO of the new observation under q(z_new) q(y_new) at MAP zeta_new."""
    w = model.w
    T = model.T
    n0, n1 = model.class_counts
    El = model.q_sigma.mean_log
    Einv = model.q_sigma.mean_inv
    xi_ = xi[:, None]
    ll = np.zeros(X.shape[0])
    for k, weight in ((1, w * xi_), (0, w * (1.0 - xi_)), (EMPTY, (1.0 - w) + 0.0 * xi_)):
        r = X - model.q_mu[k].mean - z_mean
        e = r * r + model.q_mu[k].inv_diag + inv_diag
        ll += np.sum(weight * (-0.5 * LOG2PI - 0.5 * El[k] - 0.5 * Einv[k] * e), axis=1)
    A, B = _perturbation_terms(model, z_mean, inv_diag, inv_off)
    ez = np.exp(zeta)
    c = model.q_tau.mean_inv
    _, _, K = trace_coefficients(z_mean * z_mean + inv_diag, z_mean[:, :-1] * z_mean[:, 1:] + inv_off,
                                 model.grid.delta)
    logdet = (-T * model.q_tau.mean_log - (T - 1) * np.log(2.0 * model.grid.delta)
              + np.sum(model.q_R.mean[:-1]) + (T - 1) * zeta)
    zprior = 0.5 * logdet - 0.5 * c * (ez * B + A / ez + K)
    zent = 0.5 * T - np.sum(np.log(ldiag), axis=1)
    s2 = model.hyper.sigma_zeta_sq
    zeta_prior = -0.5 * zeta**2 / s2 - 0.5 * np.log(2 * np.pi * s2)
    p1 = n1 / (n0 + n1)
    xi_c = np.clip(xi, 1e-300, 1.0)
    xi_0 = np.clip(1.0 - xi, 1e-300, 1.0)
    label = xi * np.log(p1) + (1.0 - xi) * np.log(1.0 - p1) - xi * np.log(xi_c) - (1.0 - xi) * np.log(xi_0)
    return ll + zprior + zent + zeta_prior + label


def _alternate(model, X, xi0, tol, max_rounds):
    m = X.shape[0]
    xi = np.full(m, xi0, dtype=np.float64)
    zeta = np.zeros(m)
    rounds = np.zeros(m, dtype=np.int64)
    active = np.arange(m)
    for _ in range(max_rounds):
        if active.size == 0:
            break
        Xa = X[active]
        mean, ld, inv_d, inv_o = _latent_step(model, Xa, xi[active], zeta[active])
        zeta[active] = map_update_zeta_new(model, mean, inv_d, inv_o, zeta0=zeta[active])
        xi_new, _ = _xi_step(model, Xa, mean, inv_d)
        done = np.abs(xi_new - xi[active]) < tol
        xi[active] = xi_new
        rounds[active] += 1
        active = active[~done]
    # report q(z) and the QDA score consistent with the final xi
    mean, ld, inv_d, inv_o = _latent_step(model, X, xi, zeta)
    qda = np.atleast_1d(qda_score(X, model, mean))
    elbo = predictive_elbo(model, X, xi, mean, ld, inv_d, inv_o, zeta)
    return xi, qda, mean, zeta, rounds, elbo


def predict_batch(X_new, model: ModelState, tol: float = 1e-6, max_rounds: int = 50,
                  threshold: float = 0.5, starts=None) -> PredictionBatch:
    """Alternate q(z_new), the MAP perturbation and xi1 per row until xi1 settles.

    The (z, xi1) coupling can have several fixed points, so the alternation
    is run from each value in ``starts`` (default: the training class
    proportion, 0 and 1) and the fixed point with the highest predictive
    ELBO is kept. An empty ``starts`` gives the single-start iteration
    from n1/n.
    """
    X, _ = _check_model(model, X_new)
    n0, n1 = model.class_counts
    prior = n1 / (n0 + n1)
    starts = (prior, 0.0, 1.0) if starts is None else (tuple(starts) or (prior,))
    best = None
    for xi0 in starts:
        cand = _alternate(model, X, xi0, tol, max_rounds)
        if best is None:
            best = list(cand)
            continue
        better = cand[5] > best[5]
        for slot, val in enumerate(cand):
            best[slot][better] = val[better]
    xi, qda, z_mean, zeta, rounds, _ = best
    labels = (xi >= threshold).astype(np.int64)
    return PredictionBatch(xi, labels, qda, z_mean, zeta, rounds)


def predict(x_new, model: ModelState, tol: float = 1e-6, max_rounds: int = 50,
            threshold: float = 0.5, starts=None) -> Prediction:
    x = np.asarray(x_new, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict takes a single observation; use predict_batch")
    return predict_batch(x[None, :], model, tol, max_rounds, threshold, starts)[0]
