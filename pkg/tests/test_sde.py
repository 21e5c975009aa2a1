import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpda.banded import cholesky_banded, log_det, sparse_inverse_subset
from gpda.sde import (
    DiscretizationError,
    GridSpec,
    MomentField,
    build_Q_NS,
    build_Q_NS_rows,
    build_Q_S,
    expected_C_NS,
    expected_C_NS_parts,
    log_det_Q_NS,
    log_det_Q_NS_linear_part,
    trace_coefficients,
    unit_scale_C_NS,
)

# Monte Carlo over nu ~ N(0, 0.5), 1e6 draws (seed 7)
MC_E_EXP_NU = 1.28366
MC_C11 = 1.60467


def random_nu(rng, T, delta=1.0, base=2.0):
    return base + 0.5 * rng.normal(size=T) + np.log(max(delta, 1e-12)) * 0


def bidiagonal_precision(tau, nu, delta):
    """Dense B^T D^{-1} B for the Euler-Maruyama recursion with stationary start."""
    T = nu.shape[0]
    a = 1.0 - delta * np.exp(-nu[:-1])
    d = 2.0 * tau * delta * np.exp(-nu[:-1])
    B = np.eye(T)
    B[np.arange(1, T), np.arange(T - 1)] = -a
    Dinv = np.diag(np.concatenate([[1.0 / tau], 1.0 / d]))
    return B.T @ Dinv @ B


class TestBuildQNS:
    def test_worked_example(self):
        Q = build_Q_NS(1.0, np.zeros(3), GridSpec(3, 0.5))
        np.testing.assert_allclose(Q.diag, [1.25, 1.25, 1.0], rtol=1e-15)
        np.testing.assert_allclose(Q.off, [-0.5, -0.5], rtol=1e-15)

    def test_matches_dense_recursion(self, rng):
        T, delta, tau = 25, 0.3, 1.7
        nu = 0.4 + 0.3 * rng.normal(size=T)
        Q = build_Q_NS(tau, nu, GridSpec(T, delta))
        np.testing.assert_allclose(Q.to_dense(), bidiagonal_precision(tau, nu, delta), rtol=1e-12, atol=1e-12)

    def test_marginal_variance_first_location(self, rng):
        for tau in (0.3, 1.0, 4.5):
            Q = build_Q_NS(tau, np.log(5.0) + 0.3 * rng.normal(size=40), GridSpec(40, 1.0))
            assert sparse_inverse_subset(cholesky_banded(Q)).inv_diag[0] == pytest.approx(tau, rel=1e-10)

    def test_small_delta_marginal(self):
        Q = build_Q_NS(1.0, np.zeros(2), GridSpec(2, 1e-4))
        assert sparse_inverse_subset(cholesky_banded(Q)).inv_diag[0] == pytest.approx(1.0, rel=1e-10)

    def test_instability_raises(self):
        with pytest.raises(DiscretizationError, match="finer grid"):
            build_Q_NS(1.0, np.zeros(4), GridSpec(4, 1.0))
        with pytest.raises(DiscretizationError):
            build_Q_NS_rows(1.0, np.zeros((2, 4)), GridSpec(4, 1.0))

    def test_last_location_unused(self):
        grid = GridSpec(5, 0.5)
        nu = np.zeros(5)
        nu2 = nu.copy()
        nu2[-1] = -50.0
        Q1, Q2 = build_Q_NS(1.0, nu, grid), build_Q_NS(1.0, nu2, grid)
        np.testing.assert_array_equal(Q1.diag, Q2.diag)

    def test_rows_match_single(self, rng):
        grid = GridSpec(12, 1.0)
        nu = 1.5 + 0.3 * rng.normal(size=(3, 12))
        diag, off = build_Q_NS_rows(2.0, nu, grid)
        for i in range(3):
            Q = build_Q_NS(2.0, nu[i], grid)
            np.testing.assert_allclose(diag[i], Q.diag, rtol=1e-15)
            np.testing.assert_allclose(off[i], Q.off, rtol=1e-15)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            build_Q_NS(0.0, np.zeros(3), GridSpec(3, 0.5))


class TestStationary:
    def test_constant_nu_equivalence(self):
        grid = GridSpec(30, 0.7)
        for lam in (1.0, 3.0, 40.0):
            QS = build_Q_S(1.3, lam, grid)
            QN = build_Q_NS(1.3, np.full(30, np.log(lam)), grid)
            np.testing.assert_array_equal(QS.diag, QN.diag)
            np.testing.assert_array_equal(QS.off, QN.off)

    def test_definitional_example(self):
        QS = build_Q_S(1.0, 1.0, GridSpec(3, 0.5))
        np.testing.assert_allclose(QS.diag, [1.25, 1.25, 1.0])
        np.testing.assert_allclose(QS.off, [-0.5, -0.5])

    def test_scale_doubles_marginal(self):
        grid = GridSpec(10, 1.0)
        v1 = sparse_inverse_subset(cholesky_banded(build_Q_S(1.0, 6.0, grid))).inv_diag[0]
        v2 = sparse_inverse_subset(cholesky_banded(build_Q_S(2.0, 6.0, grid))).inv_diag[0]
        assert v2 == pytest.approx(2 * v1, rel=1e-12)

    def test_stationary_marginals(self):
        # the discrete AR(1) variance rises from tau towards tau / (1 - delta / (2 lam))
        tau, lam, delta = 2.0, 50.0, 1.0
        v = sparse_inverse_subset(cholesky_banded(build_Q_S(tau, lam, GridSpec(2000, delta)))).inv_diag
        limit = tau / (1.0 - delta / (2.0 * lam))
        assert np.all(np.diff(v) >= -1e-12)
        assert v[0] == pytest.approx(tau, rel=1e-12)
        assert v[-1] == pytest.approx(limit, rel=1e-10)

    def test_continuum_limit(self):
        ell, tau = 2.0, 1.5
        delta = ell / 200
        T = 601
        Q = build_Q_S(tau, ell, GridSpec(T, delta))
        e1 = np.zeros(T)
        e1[0] = 1.0
        from gpda.banded import thomas_solve

        cov = thomas_solve(Q, e1)
        lag = np.arange(T) * delta
        np.testing.assert_allclose(cov, tau * np.exp(-lag / ell), rtol=0.05)


class TestUnitScale:
    def test_scaling_identity(self, rng):
        grid = GridSpec(20, 1.0)
        nu = 1.0 + 0.3 * rng.normal(size=20)
        C = unit_scale_C_NS(nu, grid)
        for tau in (3.0, 0.7):
            Q = build_Q_NS(tau, nu, grid)
            np.testing.assert_allclose(Q.diag * tau, C.diag, rtol=1e-12)
            np.testing.assert_allclose(Q.off * tau, C.off, rtol=1e-12)


class TestExpectedC:
    def test_zero_variance(self, rng):
        grid = GridSpec(15, 1.0)
        m = 1.0 + 0.2 * rng.normal(size=15)
        E = expected_C_NS(MomentField(m, np.zeros(15)), 0.0, grid)
        C = unit_scale_C_NS(m, grid)
        np.testing.assert_allclose(E.diag, C.diag, rtol=1e-14)
        np.testing.assert_allclose(E.off, C.off, rtol=1e-14)

    def test_symmetric_lognormal(self):
        grid = GridSpec(4, 0.5)
        s = 0.3
        E = expected_C_NS(MomentField(np.zeros(4), np.full(4, 2 * s)), 0.0, grid)
        base = unit_scale_C_NS(np.zeros(4), grid)
        # every exponential moment becomes e^s; constants are untouched
        assert E.diag[0] == pytest.approx(np.exp(s) * base.diag[0], rel=1e-14)
        assert E.diag[-1] == pytest.approx(np.exp(s) * base.diag[-1], rel=1e-14)

    def test_monte_carlo_oracle(self):
        E = expected_C_NS(MomentField(np.zeros(2), np.full(2, 0.5)), 0.0, GridSpec(2, 0.5))
        assert np.exp(0.25) == pytest.approx(MC_E_EXP_NU, rel=1e-3)
        assert E.diag[0] == pytest.approx(MC_C11, rel=1e-3)
        assert E.off[0] == pytest.approx(0.5 - np.exp(0.25), rel=1e-14)

    def test_monte_carlo_random(self, rng):
        grid = GridSpec(5, 0.1)
        m = 0.3 * rng.normal(size=5)
        s = rng.uniform(0.05, 0.2, size=5)
        draws = m + np.sqrt(s) * np.random.default_rng(3).standard_normal((200_000, 5))
        acc_d = np.zeros(5)
        acc_o = np.zeros(4)
        for chunk in np.array_split(draws, 20):
            d, o = build_Q_NS_rows(1.0, chunk, grid)
            acc_d += d.sum(axis=0)
            acc_o += o.sum(axis=0)
        E = expected_C_NS(MomentField(m, s), 0.0, grid)
        np.testing.assert_allclose(acc_d / draws.shape[0], E.diag, rtol=5e-3, atol=5e-3)
        np.testing.assert_allclose(acc_o / draws.shape[0], E.off, rtol=5e-3, atol=5e-3)

    def test_parts_recombine(self, rng):
        grid = GridSpec(9, 1.0)
        mom = MomentField(1.0 + 0.2 * rng.normal(size=9), rng.uniform(0, 0.2, size=9))
        plus, minus, const = expected_C_NS_parts(mom, grid)
        zeta = 0.37
        E = expected_C_NS(mom, zeta, grid)
        np.testing.assert_allclose(np.exp(zeta) * plus.diag + np.exp(-zeta) * minus.diag + const.diag, E.diag)

    def test_zeta_shift(self, rng):
        grid = GridSpec(9, 1.0)
        m = 1.0 + 0.2 * rng.normal(size=9)
        E = expected_C_NS(MomentField(m, np.zeros(9)), 0.25, grid)
        C = unit_scale_C_NS(m + 0.25, grid)
        np.testing.assert_allclose(E.diag, C.diag, rtol=1e-13)


class TestTraceCoefficients:
    def test_trace_identity(self, rng):
        T, delta = 10, 0.8
        nu = 1.0 + 0.3 * rng.normal(size=T)
        A = rng.normal(size=(T, T))
        S = A @ A.T
        P, N, K = trace_coefficients(np.diag(S), np.diag(S, 1), delta)
        C = unit_scale_C_NS(nu, GridSpec(T, delta)).to_dense()
        expected = np.trace(S @ C)
        got = P @ np.exp(nu[:-1]) + N @ np.exp(-nu[:-1]) + K
        assert got == pytest.approx(expected, rel=1e-12)


class TestLogDet:
    def test_linear_part(self):
        grid = GridSpec(6, 0.5)
        assert log_det_Q_NS_linear_part(np.zeros(6), grid) == 0.0
        assert log_det_Q_NS_linear_part(np.full(6, 0.7), grid) == pytest.approx(5 * 0.7)

    def test_worked_example(self):
        grid = GridSpec(3, 0.5)
        dense = np.linalg.slogdet(build_Q_NS(1.0, np.zeros(3), grid).to_dense())[1]
        assert dense == pytest.approx(0.0, abs=1e-14)
        assert log_det_Q_NS(1.0, np.zeros(3), grid) == pytest.approx(dense, abs=1e-14)

    @settings(max_examples=30, deadline=None)
    @given(T=st.integers(2, 500), seed=st.integers(0, 2**32 - 1), tau=st.floats(0.1, 10.0))
    def test_analytic_matches_cholesky(self, T, seed, tau):
        rng = np.random.default_rng(seed)
        grid = GridSpec(T, 1.0)
        nu = np.log(3.0) + np.abs(rng.normal(size=T))
        L = cholesky_banded(build_Q_NS(tau, nu, grid))
        assert log_det_Q_NS(tau, nu, grid) == pytest.approx(log_det(L), abs=1e-8)


def test_recursion_monte_carlo():
    T, tau, delta = 30, 1.2, 1.0
    rng = np.random.default_rng(11)
    nu = np.log(4.0) + 0.4 * rng.normal(size=T)
    a = 1.0 - delta * np.exp(-nu[:-1])
    sd = np.sqrt(2 * tau * delta * np.exp(-nu[:-1]))
    paths = 50_000
    z = np.sqrt(tau) * rng.standard_normal(paths)
    var = [z.var()]
    for j in range(T - 1):
        z = a[j] * z + sd[j] * rng.standard_normal(paths)
        var.append(z.var())
    inv = sparse_inverse_subset(cholesky_banded(build_Q_NS(tau, nu, GridSpec(T, delta))))
    np.testing.assert_allclose(var, inv.inv_diag, rtol=0.03)
