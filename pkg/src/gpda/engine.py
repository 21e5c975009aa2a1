"""
Mean-field variational inference for two-class GP discriminant analysis.

Coordinate updates mutate a ``ModelState`` in place. CAVI factors (latent
processes, mean functions and their scales, noise variances, selection
probabilities, latent scale) are set to their exact optima; the log
length-scale fields take monotone ascent steps on their closed-form ELBO
(see ``svb``); hyperparameters (perturbations, OU scales and lengths, Ising
parameters) are MAP point estimates against ELBO + log hyperprior.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import digamma, expit, gammaln

from . import svb
from .banded import (
    BandedCholeskyFactor,
    SymTridiagonal,
    cholesky_banded,
    cholesky_banded_batch,
    sparse_inverse_subset_batch,
    thomas_solve,
    thomas_solve_batch,
    tridiag_quadform,
)
from .ising import IsingParams, expected_log_prior, map_update_ising
from .mapfit import fit_ou_hyperparams, fit_perturbations
from .sde import GridSpec, build_Q_S, expected_C_NS, expected_C_NS_parts, trace_coefficients
from .state import (
    CLASSES,
    EMPTY,
    FunctionalDataset,
    GaussianField,
    Hyperparams,
    InvGamma,
    LatentBatch,
    ModelState,
)

__all__ = [
    "FitOptions",
    "initialize",
    "update_latent",
    "update_mean_functions",
    "update_mean_scale",
    "lengthscale_problem",
    "svb_update_lengthscale",
    "update_noise_variances",
    "update_gamma",
    "update_latent_scale",
    "common_lengthscale_problem",
    "svb_update_common_lengthscale",
    "perturbation_terms",
    "map_update_perturbations",
    "map_update_R_hyper",
    "map_update_mean_ls_hyper",
    "map_update_ising_state",
    "elbo_terms",
    "compute_elbo",
    "fit",
    "set_threads",
]

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)


@dataclass
class FitOptions:
    tol: float = 1e-4
    max_sweeps: int = 100
    pure_cavi: bool = False
    svb_steps: int = 25
    svb_gtol: float = 1e-6
    svb_method: str = "newton"
    threads: int | None = None
    record_elbo: bool = True
    validate: bool = True


def set_threads(n: int | None):
    """Set the worker count used by the row-batched kernels."""
    if n is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------------------
# shared expectations
# ---------------------------------------------------------------------------


def _stable_length_scale(lam, grid):
    return max(float(lam), 1.01 * grid.delta)


def _prior_Q_nu(state: ModelState) -> SymTridiagonal:
    return build_Q_S(state.eta_tilde, state.lambda_tilde, state.grid)


def _prior_Q_R(state: ModelState) -> SymTridiagonal:
    return build_Q_S(state.tau2, state.lam, state.grid)


def _mean_prior_precision(state: ModelState, k: int) -> SymTridiagonal:
    EC = expected_C_NS(state.q_nu[k].moments, 0.0, state.grid)
    return EC.scaled(state.q_tau_tilde[k].mean_inv)


def _latent_prior_precision(state: ModelState, zeta):
    plus, minus, const = expected_C_NS_parts(state.q_R.moments, state.grid)
    c = state.q_tau.mean_inv
    ez = np.exp(np.asarray(zeta))[:, None]
    diag = c * (ez * plus.diag + minus.diag / ez + const.diag)
    off = c * (ez * plus.off + const.off)
    return diag, off


def _R_exponential_moments(state: ModelState):
    m, s = state.q_R.mean, state.q_R.inv_diag
    return np.exp(m[:-1] + 0.5 * s[:-1]), np.exp(-m[:-1] + 0.5 * s[:-1])


def _latent_trace_coefficients(state: ModelState):
    S_diag, S_off = state.q_z.second_moment()
    return trace_coefficients(S_diag, S_off, state.grid.delta)


def perturbation_terms(state: ModelState):
    """Per-observation (A_i, B_i, K_i) with tr(E[z z^T] E C_NS(R + zeta)) = e^-zeta A + e^zeta B + K."""
    P, N, K = _latent_trace_coefficients(state)
    EE, Ee = _R_exponential_moments(state)
    return N @ Ee, P @ EE, K


def _residual_sums(state: ModelState, data: FunctionalDataset):
    """Sum over relevant rows of E(x_ij - mu_kj - z_ij)^2 for k = 0, 1, empty."""
    X, y = data.X, data.y
    z = state.q_z
    out = np.zeros((3, state.T))
    for k in CLASSES:
        rows = slice(None) if k == EMPTY else (y == k)
        mk = state.q_mu[k]
        r = X[rows] - mk.mean - z.mean[rows]
        out[k] = np.sum(r * r + z.inv_diag[rows], axis=0) + r.shape[0] * mk.inv_diag
    return out


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------


def initialize(data: FunctionalDataset, hyper: Hyperparams) -> ModelState:
    grid = data.grid
    hyper = hyper.resolved(grid)
    T = grid.T
    n0, n1 = data.class_counts() if data.n else (0, 0)
    eta0 = hyper.B_eta / (hyper.A_eta + 1.0)
    lt0 = _stable_length_scale(np.exp(hyper.mu_lambda_tilde), grid)
    tau2_0 = hyper.B_tau2 / (hyper.A_tau2 + 1.0)
    lam0 = _stable_length_scale(np.exp(hyper.mu_lambda), grid)
    Qs_nu = build_Q_S(eta0, lt0, grid)
    Qs_R = build_Q_S(tau2_0, lam0, grid)
    q_nu = [GaussianField(np.full(T, hyper.mu_nu_tilde), cholesky_banded(Qs_nu)) for _ in CLASSES]
    q_R = GaussianField(np.full(T, hyper.mu_nu), cholesky_banded(Qs_R))
    q_tau_tilde = [InvGamma(hyper.A_tau_tilde, hyper.B_tau_tilde) for _ in CLASSES]
    q_sigma = InvGamma(np.full((3, T), hyper.A_eps), np.full((3, T), hyper.B_eps))
    n = data.n
    state = ModelState(
        grid=grid,
        hyper=hyper,
        class_counts=(n0, n1),
        q_mu=[None, None, None],
        q_nu=q_nu,
        q_tau_tilde=q_tau_tilde,
        q_sigma=q_sigma,
        q_z=None,
        q_tau=InvGamma(hyper.A_tau, hyper.B_tau),
        q_R=q_R,
        w=np.full(T, 0.5),
        zeta=np.zeros(n),
        lam=lam0,
        tau2=tau2_0,
        eta_tilde=eta0,
        lambda_tilde=lt0,
        ising=IsingParams(2.0, 1.0),
    )
    for k in CLASSES:
        rows = data.X if k == EMPTY else data.X[data.y == k]
        mean = rows.mean(axis=0) if rows.shape[0] else np.zeros(T)
        state.q_mu[k] = GaussianField.from_precision(mean, _mean_prior_precision(state, k))
    diag, off = _latent_prior_precision(state, state.zeta)
    ld, ls = cholesky_banded_batch(diag, off)
    inv_d, inv_o = sparse_inverse_subset_batch(ld, ls)
    state.q_z = LatentBatch(np.zeros((n, T)), ld, ls, inv_d, inv_o)
    return state


# ---------------------------------------------------------------------------
# CAVI updates
# ---------------------------------------------------------------------------


def update_latent(state: ModelState, data: FunctionalDataset, rows=None):
    """q(z_i) for the given rows (default: all)."""
    idx = np.arange(data.n) if rows is None else np.atleast_1d(np.asarray(rows))
    w = state.w
    Einv = state.q_sigma.mean_inv
    y = data.y[idx]
    X = data.X[idx]
    ey = w * Einv[y]
    e0 = (1.0 - w) * Einv[EMPTY]
    diag, off = _latent_prior_precision(state, state.zeta[idx])
    diag = diag + ey + e0
    means = np.stack([state.q_mu[k].mean for k in CLASSES])
    rhs = ey * (X - means[y]) + e0 * (X - means[EMPTY])
    mean = thomas_solve_batch(diag, off, rhs)
    ld, ls = cholesky_banded_batch(diag, off)
    inv_d, inv_o = sparse_inverse_subset_batch(ld, ls)
    z = state.q_z
    z.mean[idx], z.ldiag[idx], z.lsub[idx], z.inv_diag[idx], z.inv_off[idx] = mean, ld, ls, inv_d, inv_o


def update_mean_functions(state: ModelState, data: FunctionalDataset):
    """q(mu_k) for k = 0, 1 and the shared component."""
    w = state.w
    Einv = state.q_sigma.mean_inv
    resid = data.X - state.q_z.mean
    for k in CLASSES:
        if k == EMPTY:
            count, total, weight = data.n, resid.sum(axis=0), 1.0 - w
        else:
            mask = data.y == k
            count, total, weight = int(mask.sum()), resid[mask].sum(axis=0), w
        Q = _mean_prior_precision(state, k) + SymTridiagonal(count * weight * Einv[k], np.zeros(state.T - 1))
        mean = thomas_solve(Q, Einv[k] * weight * total)
        state.q_mu[k] = GaussianField.from_precision(mean, Q)


def update_mean_scale(state: ModelState):
    """q(tau_tilde_k) = InvGa(A + T/2, B + tr[E(mu mu^T) E C_NS]/2)."""
    h = state.hyper
    for k in CLASSES:
        S_diag, S_off = state.q_mu[k].second_moment()
        EC = expected_C_NS(state.q_nu[k].moments, 0.0, state.grid)
        tr = float(np.dot(S_diag, EC.diag) + 2.0 * np.dot(S_off, EC.off))
        state.q_tau_tilde[k] = InvGamma(h.A_tau_tilde + 0.5 * state.T, h.B_tau_tilde + 0.5 * tr)


def update_noise_variances(state: ModelState, data: FunctionalDataset):
    h = state.hyper
    w = state.w
    n0, n1 = state.class_counts
    SR = _residual_sums(state, data)
    a = np.empty((3, state.T))
    b = np.empty((3, state.T))
    for k, count, weight in ((0, n0, w), (1, n1, w), (EMPTY, data.n, 1.0 - w)):
        a[k] = h.A_eps + 0.5 * count * weight
        b[k] = h.B_eps + 0.5 * weight * SR[k]
    state.q_sigma = InvGamma(a, b)


@numba.njit(cache=True)
def _gamma_sweep(base, beta, w):
    T = base.shape[0]
    for j in range(T):
        nb = 0.0
        if j > 0:
            nb += w[j - 1]
        if j < T - 1:
            nb += w[j + 1]
        x = base[j] + beta * nb
        if x >= 0:
            w[j] = 1.0 / (1.0 + np.exp(-x))
        else:
            ex = np.exp(x)
            w[j] = ex / (1.0 + ex)


def gamma_evidence(state: ModelState, data: FunctionalDataset):
    """Log-odds contribution of the data to gamma_j = 1 (excluding the Ising terms)."""
    n0, n1 = state.class_counts
    El = state.q_sigma.mean_log
    Ei = state.q_sigma.mean_inv
    SR = _residual_sums(state, data)
    u = 0.5 * (n1 * El[1] + n0 * El[0] - data.n * El[EMPTY])
    G = Ei[1] * SR[1] + Ei[0] * SR[0] - Ei[EMPTY] * SR[EMPTY]
    return -u - 0.5 * G


def update_gamma(state: ModelState, data: FunctionalDataset):
    """In-place sweep over locations of w_j = q(gamma_j = 1)."""
    base = gamma_evidence(state, data) - state.ising.alpha
    w = state.w.copy()
    _gamma_sweep(base, float(state.ising.beta), w)
    state.w = w


def update_latent_scale(state: ModelState):
    h = state.hyper
    A, B, K = perturbation_terms(state)
    ez = np.exp(state.zeta)
    total = float(np.sum(ez * B + A / ez + K))
    state.q_tau = InvGamma(h.A_tau + 0.5 * state.q_z.n * state.T, h.B_tau + 0.5 * total)


# ---------------------------------------------------------------------------
# SVB updates
# ---------------------------------------------------------------------------


def _lin_vector(T, coef):
    lin = np.full(T, float(coef))
    lin[-1] = 0.0
    return lin


def lengthscale_problem(state: ModelState, k: int) -> svb.SVBProblem:
    S_diag, S_off = state.q_mu[k].second_moment()
    P, N, _ = trace_coefficients(S_diag, S_off, state.grid.delta)
    c = state.q_tau_tilde[k].mean_inv
    return svb.SVBProblem(
        lin=_lin_vector(state.T, 0.5),
        P=c * P,
        N=c * N,
        prior_mean=np.full(state.T, state.hyper.mu_nu_tilde),
        prior_precision=_prior_Q_nu(state),
    )


def svb_update_lengthscale(state: ModelState, k: int, options: FitOptions | None = None):
    options = options or FitOptions()
    q = state.q_nu[k]
    res = svb.ascend(lengthscale_problem(state, k), q.mean, q.factor, max_steps=options.svb_steps,
                     gtol=options.svb_gtol, method=options.svb_method)
    state.q_nu[k] = GaussianField(res.mean, res.factor)
    return res


def common_lengthscale_problem(state: ModelState) -> svb.SVBProblem:
    P, N, _ = _latent_trace_coefficients(state)
    ez = np.exp(state.zeta)[:, None]
    c = state.q_tau.mean_inv
    return svb.SVBProblem(
        lin=_lin_vector(state.T, 0.5 * state.q_z.n),
        P=c * np.sum(ez * P, axis=0),
        N=c * np.sum(N / ez, axis=0),
        prior_mean=np.full(state.T, state.hyper.mu_nu),
        prior_precision=_prior_Q_R(state),
    )


def svb_update_common_lengthscale(state: ModelState, options: FitOptions | None = None):
    options = options or FitOptions()
    q = state.q_R
    res = svb.ascend(common_lengthscale_problem(state), q.mean, q.factor, max_steps=options.svb_steps,
                     gtol=options.svb_gtol, method=options.svb_method)
    state.q_R = GaussianField(res.mean, res.factor)
    return res


# ---------------------------------------------------------------------------
# MAP updates
# ---------------------------------------------------------------------------


def map_update_perturbations(state: ModelState, rows=None):
    if state.q_z.n == 0:
        return
    idx = np.arange(state.q_z.n) if rows is None else np.atleast_1d(np.asarray(rows))
    A, B, _ = perturbation_terms(state)
    state.zeta[idx] = fit_perturbations(A[idx], B[idx], state.q_tau.mean_inv, state.T,
                                        state.hyper.sigma_zeta_sq, zeta0=state.zeta[idx])


def _field_second_moment(fields, center):
    diag = np.zeros(fields[0].T)
    off = np.zeros(fields[0].T - 1)
    for f in fields:
        d, o = f.second_moment(center)
        diag += d
        off += o
    return diag, off


def map_update_R_hyper(state: ModelState):
    h = state.hyper
    M_diag, M_off = _field_second_moment([state.q_R], h.mu_nu)
    res = fit_ou_hyperparams(M_diag, M_off, 1, state.grid, h.A_tau2, h.B_tau2, h.mu_lambda, h.sigma_lambda)
    state.tau2, state.lam = res.scale, res.length_scale
    if res.clamped:
        state.notes.append("lambda clamped at stability floor")
    return res


def map_update_mean_ls_hyper(state: ModelState):
    h = state.hyper
    M_diag, M_off = _field_second_moment(state.q_nu, h.mu_nu_tilde)
    res = fit_ou_hyperparams(M_diag, M_off, len(state.q_nu), state.grid, h.A_eta, h.B_eta,
                             h.mu_lambda_tilde, h.sigma_lambda_tilde)
    state.eta_tilde, state.lambda_tilde = res.scale, res.length_scale
    if res.clamped:
        state.notes.append("lambda_tilde clamped at stability floor")
    return res


def map_update_ising_state(state: ModelState):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = map_update_ising(state.w, state.hyper.ising_hyperprior(), init=state.ising)
    if caught:
        state.notes.append("Ising MAP at parameter box")
    state.ising = res.params
    return res


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------


def _invgamma_elbo(q: InvGamma, A, B) -> float:
    a, b = np.asarray(q.a, dtype=np.float64), np.asarray(q.b, dtype=np.float64)
    Elog = np.log(b) - digamma(a)
    Elogp = A * np.log(B) - gammaln(A) - (A + 1.0) * Elog - B * a / b
    H = a + np.log(b) + gammaln(a) - (1.0 + a) * digamma(a)
    return float(np.sum(Elogp + H))


def _gaussian_prior_term(q: GaussianField, center, Q: SymTridiagonal, logdet_Q: float) -> float:
    """E_q log N(v; center, Q^{-1}) + entropy of q."""
    T = q.T
    r = q.mean - center
    quad = tridiag_quadform(Q, r) + float(np.dot(Q.diag, q.inv_diag) + 2.0 * np.dot(Q.off, q.inv_off))
    return 0.5 * logdet_Q - 0.5 * quad + 0.5 * T - 0.5 * q.log_det_precision()


def _logdet_Q_S(scale, lam, grid):
    return -grid.T * np.log(scale) - (grid.T - 1) * (np.log(2.0 * grid.delta) - np.log(lam))


def _bernoulli_entropy(w):
    w = np.clip(w, 1e-300, 1.0)
    wc = np.clip(1.0 - w, 1e-300, 1.0)
    return float(-np.sum(w * np.log(w) + (1.0 - w) * np.log(wc)))


def elbo_terms(state: ModelState, data: FunctionalDataset, include_hyperpriors: bool = False) -> dict:
    """Named components of the ELBO; their sum is ``compute_elbo``."""
    h, grid = state.hyper, state.grid
    T, n = grid.T, data.n
    n0, n1 = state.class_counts
    w = state.w
    El, Ei = state.q_sigma.mean_log, state.q_sigma.mean_inv
    terms = {}

    SR = _residual_sums(state, data)
    terms["likelihood"] = float(
        -0.5 * n * T * LOG2PI
        - 0.5 * np.sum(w * (n1 * El[1] + n0 * El[0] + Ei[1] * SR[1] + Ei[0] * SR[0]))
        - 0.5 * np.sum((1.0 - w) * (n * El[EMPTY] + Ei[EMPTY] * SR[EMPTY]))
    )

    # latent processes: prior under Q_NS(tau, R + zeta_i) plus entropy
    if n:
        A, B, K = perturbation_terms(state)
        ez = np.exp(state.zeta)
        traces = ez * B + A / ez + K
        Elog_logdet = (-T * state.q_tau.mean_log - (T - 1) * np.log(2.0 * grid.delta)
                       + np.sum(state.q_R.mean[:-1]) + (T - 1) * state.zeta)
        zprior = 0.5 * Elog_logdet - 0.5 * state.q_tau.mean_inv * traces
        zent = 0.5 * T - 0.5 * state.q_z.log_det_precision()
        terms["latent"] = float(np.sum(zprior + zent))
    else:
        terms["latent"] = 0.0
    terms["latent_scale"] = _invgamma_elbo(state.q_tau, h.A_tau, h.B_tau)
    terms["common_lengthscale"] = _gaussian_prior_term(
        state.q_R, h.mu_nu, _prior_Q_R(state), _logdet_Q_S(state.tau2, state.lam, grid))

    Q_nu = _prior_Q_nu(state)
    logdet_nu = _logdet_Q_S(state.eta_tilde, state.lambda_tilde, grid)
    mean_terms = 0.0
    for k in CLASSES:
        qm, qn, qt = state.q_mu[k], state.q_nu[k], state.q_tau_tilde[k]
        S_diag, S_off = qm.second_moment()
        EC = expected_C_NS(qn.moments, 0.0, grid)
        tr = float(np.dot(S_diag, EC.diag) + 2.0 * np.dot(S_off, EC.off))
        Elogdet = -T * qt.mean_log - (T - 1) * np.log(2.0 * grid.delta) + np.sum(qn.mean[:-1])
        mean_terms += 0.5 * Elogdet - 0.5 * qt.mean_inv * tr + 0.5 * T - 0.5 * qm.log_det_precision()
        mean_terms += _gaussian_prior_term(qn, h.mu_nu_tilde, Q_nu, logdet_nu)
        mean_terms += _invgamma_elbo(qt, h.A_tau_tilde, h.B_tau_tilde)
    terms["mean_functions"] = float(mean_terms)
    terms["noise"] = _invgamma_elbo(state.q_sigma, h.A_eps, h.B_eps)
    terms["selection"] = expected_log_prior(w, state.ising) + _bernoulli_entropy(w)

    if include_hyperpriors:
        from .mapfit import _log_invgamma, _log_lognormal

        hp = float(np.sum(-0.5 * state.zeta**2 / h.sigma_zeta_sq - 0.5 * np.log(2 * np.pi * h.sigma_zeta_sq)))
        hp += _log_invgamma(state.tau2, h.A_tau2, h.B_tau2) + _log_lognormal(state.lam, h.mu_lambda, h.sigma_lambda)
        hp += _log_invgamma(state.eta_tilde, h.A_eta, h.B_eta)
        hp += _log_lognormal(state.lambda_tilde, h.mu_lambda_tilde, h.sigma_lambda_tilde)
        hp += h.ising_hyperprior().log_density(state.ising.alpha, state.ising.beta)
        terms["hyperpriors"] = float(hp)
    return terms


def compute_elbo(state: ModelState, data: FunctionalDataset, include_hyperpriors: bool = False) -> float:
    return float(sum(elbo_terms(state, data, include_hyperpriors).values()))


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _snapshot(state: ModelState):
    return {
        "w": state.w.copy(),
        "mu": np.concatenate([q.mean for q in state.q_mu]),
        "nu": np.concatenate([q.mean for q in state.q_nu]),
        "R": state.q_R.mean.copy(),
        "sigma_rate": state.q_sigma.b.copy(),
        "scale_rates": np.array([q.b for q in state.q_tau_tilde] + [state.q_tau.b], dtype=float),
        "map": np.concatenate([state.zeta, [state.lam, state.tau2, state.eta_tilde, state.lambda_tilde,
                                            state.ising.alpha, state.ising.beta]]),
    }


def _relative_change(old, new):
    worst = 0.0
    for key, before in old.items():
        after = new[key]
        if before.size == 0:
            continue
        scale = max(1.0, float(np.max(np.abs(before))))
        worst = max(worst, float(np.max(np.abs(after - before))) / scale)
    return worst


def sweep(state: ModelState, data: FunctionalDataset, options: FitOptions):
    """One pass over every coordinate in the fixed update order."""
    update_latent(state, data)
    update_mean_functions(state, data)
    update_mean_scale(state)
    if not options.pure_cavi:
        for k in CLASSES:
            svb_update_lengthscale(state, k, options)
    update_noise_variances(state, data)
    update_gamma(state, data)
    update_latent_scale(state)
    if not options.pure_cavi:
        svb_update_common_lengthscale(state, options)
        map_update_perturbations(state)
        map_update_R_hyper(state)
        map_update_mean_ls_hyper(state)
        map_update_ising_state(state)


def fit(data: FunctionalDataset, hyper: Hyperparams | None = None, options: FitOptions | None = None,
        state: ModelState | None = None) -> ModelState:
    """Run coordinate sweeps until the relative parameter change drops below ``options.tol``."""
    hyper = Hyperparams() if hyper is None else hyper
    options = FitOptions() if options is None else options
    if options.validate:
        data.check_trainable()
    set_threads(options.threads)
    if state is None:
        state = initialize(data, hyper)
    for it in range(options.max_sweeps):
        before = _snapshot(state)
        sweep(state, data, options)
        state.n_sweeps += 1
        if options.record_elbo:
            state.elbo_trace.append(compute_elbo(state, data, include_hyperpriors=True))
        change = _relative_change(before, _snapshot(state))
        log.debug("sweep %d: relative change %.3e", state.n_sweeps, change)
        if change < options.tol:
            state.converged = True
            break
    return state
