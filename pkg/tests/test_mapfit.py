import warnings

import numpy as np
import pytest
from scipy.special import gammaln

from gpda.banded import BandedCholeskyFactor
from gpda.engine import (
    map_update_ising_state,
    map_update_mean_ls_hyper,
    map_update_perturbations,
    map_update_R_hyper,
    perturbation_terms,
)
from gpda.mapfit import fit_ou_hyperparams, fit_perturbations, perturbation_gradient
from gpda.sde import GridSpec, expected_C_NS
from gpda.state import GaussianField

from conftest import dense_Q_NS, fitted_state

# grid search + refinement on the reduced objective (three fields, T=5, zero second moment)
ETA_DEGENERATE = 0.09523809401556929
LAMBDA_TILDE_DEGENERATE = 222.61973017023567
# 1-D grid search, single field, T=7, zero second moment, InvGa(2, 1) prior
TAU2_DEGENERATE_T7 = 0.1538464887544556


def gauss_objective(fields, center, log_scale, log_ls, grid, A, B, mu, sigma):
    """sum_k E log N(v_k; c, Q_S^-1) + log InvGa(scale) + log LogN(ls), with dense algebra."""
    T = grid.T
    Q = dense_Q_NS(np.exp(log_scale), np.full(T, log_ls), grid.delta)
    logdet = np.linalg.slogdet(Q)[1]
    out = 0.0
    for f in fields:
        L = f.factor.to_dense()
        S = np.linalg.inv(L @ L.T) + np.outer(f.mean - center, f.mean - center)
        out += 0.5 * logdet - 0.5 * T * np.log(2 * np.pi) - 0.5 * np.trace(Q @ S)
    s = np.exp(log_scale)
    out += A * np.log(B) - gammaln(A) - (A + 1) * log_scale - B / s
    out += -log_ls - 0.5 * np.log(2 * np.pi * sigma**2) - 0.5 * ((log_ls - mu) / sigma) ** 2
    return out


def fd_norm(f, x, h=1e-5):
    g = []
    for k in range(len(x)):
        e = np.zeros(len(x))
        e[k] = h
        g.append((f(*(x + e)) - f(*(x - e))) / (2 * h))
    return float(np.linalg.norm(g))


class TestPerturbations:
    @pytest.mark.parametrize("seed", range(4))
    def test_trace_split_matches_dense(self, seed):
        state, _ = fitted_state(seed, T=7, n=3)
        A, B, K = perturbation_terms(state)
        for i in range(3):
            f = state.q_z.field(i)
            L = f.factor.to_dense()
            S = np.linalg.inv(L @ L.T) + np.outer(f.mean, f.mean)
            for zeta in (-0.7, 0.0, 0.4):
                EC = expected_C_NS(state.q_R.moments, zeta, state.grid).to_dense()
                expected = np.trace(S @ EC)
                assert np.exp(-zeta) * A[i] + np.exp(zeta) * B[i] + K[i] == pytest.approx(expected, rel=1e-11)

    @pytest.mark.parametrize("seed", range(4))
    def test_grid_search_and_stationarity(self, seed):
        state, _ = fitted_state(seed, T=15, n=4)
        map_update_perturbations(state)
        A, B, _ = perturbation_terms(state)
        c, T, s2 = state.q_tau.mean_inv, state.T, state.hyper.sigma_zeta_sq
        for i in range(4):
            g = lambda z: 0.5 * (T - 1) * z - 0.5 * c * (np.exp(-z) * A[i] + np.exp(z) * B[i]) - z**2 / (2 * s2)
            grid = np.linspace(-5, 5, 100_001)
            z0 = grid[np.argmax(g(grid))]
            fine = np.linspace(z0 - 2e-4, z0 + 2e-4, 400_001)
            oracle = fine[np.argmax(g(fine))]
            assert state.zeta[i] == pytest.approx(oracle, abs=1e-6)
            assert abs(perturbation_gradient(state.zeta[i], A[i], B[i], c, T, s2)) < 1e-6

    def test_prior_dominated(self):
        state, _ = fitted_state(1, T=15, n=4)
        state.hyper.sigma_zeta_sq = 1e-8
        map_update_perturbations(state)
        assert np.all(np.abs(state.zeta) < 1e-3)

    def test_symmetric_terms(self):
        # with c = 1, T = 1 and A = B the objective is even in zeta
        z = fit_perturbations(np.array([2.0, 5.0]), np.array([2.0, 5.0]), 1.0, 1, 1.0)
        np.testing.assert_allclose(z, 0.0, atol=1e-12)

    def test_extreme_terms(self):
        z = fit_perturbations(np.array([1e-8, 1e6]), np.array([1e6, 1e-8]), 1.0, 200, 1.0)
        g = perturbation_gradient(z, np.array([1e-8, 1e6]), np.array([1e6, 1e-8]), 1.0, 200, 1.0)
        assert np.all(np.abs(g) < 1e-6)


class TestRHyper:
    @pytest.mark.parametrize("seed", range(4))
    def test_stationary(self, seed):
        state, _ = fitted_state(seed, T=20, n=4)
        res = map_update_R_hyper(state)
        assert not res.clamped
        h = state.hyper
        f = lambda a, b: gauss_objective([state.q_R], h.mu_nu, a, b, state.grid, h.A_tau2, h.B_tau2,
                                         h.mu_lambda, h.sigma_lambda)
        assert fd_norm(f, np.log([state.tau2, state.lam])) < 1e-4

    def test_degenerate_field(self):
        state, _ = fitted_state(0, T=7, n=4)
        state.q_R = GaussianField(np.zeros(7), BandedCholeskyFactor(np.full(7, 1e7), np.zeros(6)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            map_update_R_hyper(state)
        assert state.tau2 == pytest.approx(TAU2_DEGENERATE_T7, rel=1e-5)
        # the closed form behind the oracle: B / (A + 1 + T/2)
        assert TAU2_DEGENERATE_T7 == pytest.approx(1.0 / (3.0 + 3.5), rel=1e-5)

    def test_scaling_mean_increases_scale(self):
        state, _ = fitted_state(2, T=30, n=4)
        state.q_R = GaussianField(np.sin(np.arange(30) / 5.0), state.q_R.factor)
        map_update_R_hyper(state)
        before = state.tau2
        state.q_R = GaussianField(2 * state.q_R.mean, state.q_R.factor)
        map_update_R_hyper(state)
        assert state.tau2 > before

    def test_clamp_at_stability_floor(self):
        grid = GridSpec(50, 1.0)
        rng = np.random.default_rng(0)
        M = rng.normal(size=50) ** 2 * 50
        with pytest.warns(RuntimeWarning, match="stability floor"):
            res = fit_ou_hyperparams(M, np.zeros(49), 1, grid, 2.0, 1.0, np.log(0.5), 0.1)
        assert res.clamped and res.length_scale == pytest.approx(1.01)


class TestMeanLsHyper:
    @pytest.mark.parametrize("seed", range(4))
    def test_stationary(self, seed):
        state, _ = fitted_state(seed, T=20, n=4)
        map_update_mean_ls_hyper(state)
        h = state.hyper
        f = lambda a, b: gauss_objective(state.q_nu, h.mu_nu_tilde, a, b, state.grid, h.A_eta, h.B_eta,
                                         h.mu_lambda_tilde, h.sigma_lambda_tilde)
        assert fd_norm(f, np.log([state.eta_tilde, state.lambda_tilde])) < 1e-4

    def test_degenerate_grid_search(self):
        state, _ = fitted_state(0, T=5, n=4)
        mu = state.hyper.mu_nu_tilde
        assert state.hyper.mu_lambda_tilde == pytest.approx(np.log(1.5))
        for k in range(3):
            state.q_nu[k] = GaussianField(np.full(5, mu), BandedCholeskyFactor(np.full(5, 1e7), np.zeros(4)))
        map_update_mean_ls_hyper(state)
        assert state.eta_tilde == pytest.approx(ETA_DEGENERATE, rel=1e-4)
        assert state.lambda_tilde == pytest.approx(LAMBDA_TILDE_DEGENERATE, rel=1e-4)

    def test_more_spread_gives_larger_scale(self):
        state, _ = fitted_state(3, T=25, n=4)
        map_update_mean_ls_hyper(state)
        before = state.eta_tilde
        # dividing the factor by sqrt(2) doubles every covariance
        state.q_nu = [GaussianField(q.mean, BandedCholeskyFactor(q.factor.ldiag / np.sqrt(2), q.factor.lsub / np.sqrt(2)))
                      for q in state.q_nu]
        map_update_mean_ls_hyper(state)
        assert state.eta_tilde > before


class TestIsingState:
    def test_notes_boundary(self):
        state, _ = fitted_state(0, T=10, n=4)
        state.w = np.zeros(10)
        state.hyper.alpha_sd = None
        state.hyper.log_beta_sd = None
        map_update_ising_state(state)
        assert any("Ising" in note for note in state.notes)
