import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpda.banded import (
    BandedCholeskyFactor,
    NotPositiveDefiniteError,
    SingularMatrixError,
    SymTridiagonal,
    cholesky_banded,
    cholesky_banded_batch,
    log_det,
    sample_gaussian,
    sample_gaussian_rows,
    sparse_inverse_subset,
    sparse_inverse_subset_batch,
    takahashi_adjoint,
    thomas_solve,
    thomas_solve_batch,
    tridiag_matvec,
    tridiag_quadform,
    tridiag_trace_product,
)

from conftest import random_spd


def tri(diag, off):
    return SymTridiagonal(np.array(diag, float), np.array(off, float))


class TestThomas:
    def test_identity(self):
        np.testing.assert_allclose(thomas_solve(tri([1, 1, 1], [0, 0]), [3, 4, 5]), [3, 4, 5])

    def test_row_sums(self):
        np.testing.assert_allclose(thomas_solve(tri([2, 2], [-1]), [1, 1]), [1, 1], atol=1e-15)

    def test_laplacian(self):
        np.testing.assert_allclose(thomas_solve(tri([2, 2, 2], [-1, -1]), [1, 0, 0]), [0.75, 0.5, 0.25],
                                   atol=1e-15)

    def test_singular(self):
        with pytest.raises(SingularMatrixError):
            thomas_solve(tri([1, 1], [1]), [1, 2])
        with pytest.raises(SingularMatrixError):
            thomas_solve(tri([0.0, 1.0], [0.0]), [1, 2])

    def test_shape_error(self):
        with pytest.raises(ValueError):
            thomas_solve(tri([1, 1], [0]), [1, 2, 3])

    def test_batch_matches_single(self, rng):
        mats = [random_spd(rng, 30) for _ in range(5)]
        b = rng.normal(size=(5, 30))
        out = thomas_solve_batch(np.stack([m.diag for m in mats]), np.stack([m.off for m in mats]), b)
        for i, m in enumerate(mats):
            np.testing.assert_array_equal(out[i], thomas_solve(m, b[i]))

    @settings(max_examples=60, deadline=None)
    @given(T=st.integers(1, 200), seed=st.integers(0, 2**32 - 1))
    def test_residual(self, T, seed):
        rng = np.random.default_rng(seed)
        Q = random_spd(rng, T) if T > 1 else tri([rng.uniform(0.5, 2)], [])
        b = rng.normal(size=T)
        x = thomas_solve(Q, b)
        assert np.max(np.abs(tridiag_matvec(Q, x) - b)) <= 1e-10 * np.max(np.abs(b))


class TestCholesky:
    def test_identity(self):
        L = cholesky_banded(tri([1, 1], [0]))
        np.testing.assert_allclose(L.ldiag, [1, 1])
        np.testing.assert_allclose(L.lsub, [0])

    def test_two_by_two(self):
        L = cholesky_banded(tri([2, 2], [-1]))
        np.testing.assert_allclose(L.ldiag, [np.sqrt(2), np.sqrt(1.5)], rtol=1e-15)
        np.testing.assert_allclose(L.lsub, [-1 / np.sqrt(2)], rtol=1e-15)

    def test_three_by_three(self):
        L = cholesky_banded(tri([4, 4, 4], [2, 2]))
        np.testing.assert_allclose(L.ldiag, [2, np.sqrt(3), np.sqrt(8 / 3)], rtol=1e-15)
        np.testing.assert_allclose(L.lsub, [1, 2 / np.sqrt(3)], rtol=1e-15)

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefiniteError):
            cholesky_banded(tri([1, 1], [2]))
        with pytest.raises(NotPositiveDefiniteError):
            cholesky_banded_batch(np.array([[1.0, 1.0], [1.0, 1.0]]), np.array([[0.0], [3.0]]))

    def test_factor_rejects_nonpositive_diagonal(self):
        with pytest.raises(NotPositiveDefiniteError):
            BandedCholeskyFactor(np.array([1.0, 0.0]), np.array([0.0]))

    @settings(max_examples=60, deadline=None)
    @given(T=st.integers(2, 300), seed=st.integers(0, 2**32 - 1))
    def test_reconstruction(self, T, seed):
        Q = random_spd(np.random.default_rng(seed), T)
        R = cholesky_banded(Q).reconstruct()
        np.testing.assert_allclose(R.diag, Q.diag, rtol=1e-12)
        np.testing.assert_allclose(R.off, Q.off, rtol=1e-12, atol=1e-12 * np.max(np.abs(Q.diag)))


class TestInverseSubset:
    def test_identity(self):
        inv = sparse_inverse_subset(BandedCholeskyFactor(np.ones(2), np.zeros(1)))
        np.testing.assert_allclose(inv.inv_diag, [1, 1])
        np.testing.assert_allclose(inv.inv_off, [0])

    def test_two_by_two(self):
        inv = sparse_inverse_subset(cholesky_banded(tri([2, 2], [-1])))
        np.testing.assert_allclose(inv.inv_diag, [2 / 3, 2 / 3], rtol=1e-14)
        np.testing.assert_allclose(inv.inv_off, [1 / 3], rtol=1e-14)

    def test_three_by_three(self):
        inv = sparse_inverse_subset(cholesky_banded(tri([2, 2, 2], [-1, -1])))
        np.testing.assert_allclose(inv.inv_diag, [0.75, 1.0, 0.75], rtol=1e-14)
        np.testing.assert_allclose(inv.inv_off, [0.5, 0.5], rtol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(T=st.integers(2, 200), seed=st.integers(0, 2**32 - 1))
    def test_dense_and_cauchy_schwarz(self, T, seed):
        Q = random_spd(np.random.default_rng(seed), T)
        inv = sparse_inverse_subset(cholesky_banded(Q))
        dense = np.linalg.inv(Q.to_dense())
        np.testing.assert_allclose(inv.inv_diag, np.diag(dense), atol=1e-9)
        np.testing.assert_allclose(inv.inv_off, np.diag(dense, 1), atol=1e-9)
        assert np.all(inv.inv_diag > 0)
        assert np.all(inv.inv_off**2 <= inv.inv_diag[:-1] * inv.inv_diag[1:] * (1 + 1e-12))

    def test_batch_matches_single(self, rng):
        mats = [random_spd(rng, 17) for _ in range(4)]
        ld, ls = cholesky_banded_batch(np.stack([m.diag for m in mats]), np.stack([m.off for m in mats]))
        d, o = sparse_inverse_subset_batch(ld, ls)
        for i, m in enumerate(mats):
            inv = sparse_inverse_subset(cholesky_banded(m))
            np.testing.assert_array_equal(d[i], inv.inv_diag)
            np.testing.assert_array_equal(o[i], inv.inv_off)

    def test_adjoint_matches_finite_differences(self, rng):
        T = 12
        L = cholesky_banded(random_spd(rng, T))
        gd, go = rng.normal(size=T), rng.normal(size=T - 1)

        def f(ldiag, lsub):
            inv = sparse_inverse_subset(BandedCholeskyFactor(ldiag, lsub))
            return gd @ inv.inv_diag + go @ inv.inv_off

        bar_d, bar_l = takahashi_adjoint(L, sparse_inverse_subset(L).inv_diag, gd, go)
        h = 1e-6
        for j in range(T):
            e = np.zeros(T)
            e[j] = h
            fd = (f(L.ldiag + e, L.lsub) - f(L.ldiag - e, L.lsub)) / (2 * h)
            assert abs(fd - bar_d[j]) <= 1e-6 * max(1.0, abs(fd))
        for j in range(T - 1):
            e = np.zeros(T - 1)
            e[j] = h
            fd = (f(L.ldiag, L.lsub + e) - f(L.ldiag, L.lsub - e)) / (2 * h)
            assert abs(fd - bar_l[j]) <= 1e-6 * max(1.0, abs(fd))


class TestLogDet:
    def test_examples(self):
        assert log_det(BandedCholeskyFactor(np.ones(3), np.zeros(2))) == 0.0
        assert log_det(cholesky_banded(tri([2, 2], [-1]))) == pytest.approx(np.log(3), abs=1e-14)
        assert log_det(cholesky_banded(tri([np.e] * 4, [0, 0, 0]))) == pytest.approx(4.0, abs=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(T=st.integers(2, 300), seed=st.integers(0, 2**32 - 1))
    def test_dense(self, T, seed):
        Q = random_spd(np.random.default_rng(seed), T)
        assert log_det(cholesky_banded(Q)) == pytest.approx(np.linalg.slogdet(Q.to_dense())[1], abs=1e-9)


class TestSampling:
    def test_identity_variance(self):
        L = BandedCholeskyFactor(np.ones(3), np.zeros(2))
        draws = sample_gaussian(L, 0.0, rng_seed=1, size=100_000)
        v = draws.var(axis=0)
        assert np.all((v > 0.97) & (v < 1.03))

    def test_scalar_precision(self):
        L = cholesky_banded(tri([4.0], []))
        draws = sample_gaussian(L, [1.0], rng_seed=2, size=100_000)
        assert abs(draws.var() - 0.25) < 0.01
        assert abs(draws.mean() - 1.0) < 0.01

    def test_zero_noise_returns_mean(self, rng):
        L = cholesky_banded(random_spd(rng, 6))
        mean = rng.normal(size=6)
        np.testing.assert_array_equal(sample_gaussian(L, mean, eps=np.zeros(6)), mean)

    def test_covariance(self):
        Q = tri([2, 2, 2], [-1, -1])
        draws = sample_gaussian(cholesky_banded(Q), 0.0, rng_seed=3, size=200_000)
        np.testing.assert_allclose(np.cov(draws.T), np.linalg.inv(Q.to_dense()), atol=0.02)

    def test_rows_match_single(self, rng):
        mats = [random_spd(rng, 9) for _ in range(3)]
        ld, ls = cholesky_banded_batch(np.stack([m.diag for m in mats]), np.stack([m.off for m in mats]))
        eps = rng.normal(size=(3, 9))
        out = sample_gaussian_rows(ld, ls, eps)
        for i in range(3):
            np.testing.assert_allclose(out[i], sample_gaussian(BandedCholeskyFactor(ld[i], ls[i]), 0.0, eps=eps[i]),
                                       rtol=1e-14)

    def test_seed_reproducible(self, rng):
        L = cholesky_banded(random_spd(rng, 20))
        np.testing.assert_array_equal(sample_gaussian(L, 0.0, rng_seed=5), sample_gaussian(L, 0.0, rng_seed=5))


class TestProducts:
    def test_quadform_examples(self):
        assert tridiag_quadform(tri([1, 1], [0]), [1, 2]) == 5
        assert tridiag_quadform(tri([2, 2], [-1]), [1, 1]) == 2
        assert tridiag_quadform(tri([2, 2, 2], [-1, -1]), [1, 2, 3]) == 12

    def test_trace_product(self, rng):
        A, B = random_spd(rng, 8), random_spd(rng, 8)
        expected = np.trace(A.to_dense() @ B.to_dense())
        assert tridiag_trace_product(A.diag, A.off, B.diag, B.off) == pytest.approx(expected, rel=1e-13)


def test_linear_time_scaling():
    rng = np.random.default_rng(0)

    def best(T):
        Q = random_spd(rng, T)
        b = rng.normal(size=T)
        thomas_solve(Q, b)
        times = []
        for _ in range(7):
            t0 = time.perf_counter()
            L = cholesky_banded(Q)
            sparse_inverse_subset(L)
            thomas_solve(Q, b)
            times.append(time.perf_counter() - t0)
        return min(times)

    assert best(400_000) / best(200_000) <= 2.5
