import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from pseudoics.panel import Panel, StateSpace, Subject, Trajectory
from pseudoics.pseudovalues import Method, PseudoValueSet, pseudo_method1, pseudo_method2
from pseudoics.regression import (
    GeeFit,
    ModelSpec,
    ar1_inverse,
    ar1_matrix,
    coefficient_table,
    estimate_ar1_qls,
    fit_gee,
    gee,
    wald_test,
)


def toy(rng, m=20, sizes=None, r=3):
    sizes = rng.integers(1, 6, m) if sizes is None else np.asarray(sizes)
    cluster = np.repeat(np.arange(sizes.size), sizes)
    n = cluster.size
    Z = np.column_stack([np.repeat(rng.integers(0, 2, sizes.size), sizes), rng.normal(1, 0.4, n)])
    X = np.concatenate([np.broadcast_to(np.eye(r), (n, r, r)), np.broadcast_to(Z[:, None, :], (n, r, 2))], axis=2)
    return X, cluster, sizes


def weights(cluster, sizes, scheme):
    return np.ones(cluster.size) if scheme == "gee" else 1.0 / sizes[cluster]


class TestSolve:
    @pytest.mark.parametrize("scheme", ["gee", "cwgee"])
    @pytest.mark.parametrize("corr", ["independence", "ar1"])
    def test_noiseless_recovery(self, scheme, corr):
        rng = np.random.default_rng(1)
        X, cl, sizes = toy(rng)
        beta = np.array([0.3, 0.2, 0.1, -0.4, 0.25])
        Y = X @ beta
        b, cov, *_ = gee(X, Y, weights(cl, sizes, scheme), cl, corr)
        assert_allclose(b, beta, atol=1e-10)

    def test_ols(self):
        rng = np.random.default_rng(2)
        n = 50
        X = np.column_stack([np.ones(n), rng.normal(size=n)])[:, None, :]
        Y = rng.normal(size=(n, 1))
        b, _, rho, it, conv, *_ = gee(X, Y, np.ones(n), np.arange(n))
        ref, *_ = np.linalg.lstsq(X[:, 0, :], Y[:, 0], rcond=None)
        assert_allclose(b, ref, atol=1e-12)
        assert rho is None and it == 1 and conv

    @pytest.mark.parametrize("corr", ["independence", "ar1"])
    def test_equal_sizes_gee_equals_cwgee(self, corr):
        rng = np.random.default_rng(3)
        X, cl, sizes = toy(rng, sizes=[4] * 15)
        Y = rng.normal(size=X.shape[:2])
        a = gee(X, Y, weights(cl, sizes, "gee"), cl, corr)
        b = gee(X, Y, weights(cl, sizes, "cwgee"), cl, corr)
        assert_allclose(a[0], b[0], atol=1e-10)
        assert_allclose(a[1], b[1], atol=1e-10 * np.abs(a[1]).max())

    def test_rank_deficient(self):
        X = np.ones((10, 1, 2))
        with pytest.raises(ValueError, match="rank-deficient"):
            gee(X, np.zeros((10, 1)), np.ones(10), np.arange(10))

    def test_ar1_converges(self):
        rng = np.random.default_rng(4)
        X, cl, sizes = toy(rng, m=60)
        Y = X @ np.array([0.1, 0.2, 0.3, 0.0, 0.1]) + rng.normal(size=X.shape[:2])
        b, cov, rho, it, conv, clamped, hist = gee(X, Y, np.ones(cl.size), cl, "ar1")
        assert conv and it <= 50 and hist[-1][1] < 1e-8
        assert -1 < rho < 1


class TestSandwich:
    def test_zero_for_noiseless(self):
        n = 30
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(n), rng.normal(size=n)])[:, None, :]
        Y = X @ np.array([1.0, 2.0])
        _, cov, *_ = gee(X, Y, np.ones(n), np.arange(n))
        assert_allclose(cov, 0.0, atol=1e-20)

    def test_hc0(self):
        rng = np.random.default_rng(6)
        n = 80
        A = np.column_stack([np.ones(n), rng.normal(size=n), rng.uniform(size=n)])
        y = A @ np.array([0.5, -1.0, 2.0]) + rng.normal(size=n) * (1 + A[:, 2])
        _, cov, *_ = gee(A[:, None, :], y[:, None], np.ones(n), np.arange(n))
        b = np.linalg.solve(A.T @ A, A.T @ y)
        e = y - A @ b
        bread = np.linalg.inv(A.T @ A)
        hc0 = bread @ (A.T * e**2) @ A @ bread
        assert_allclose(cov, hc0, rtol=1e-10)

    def test_cluster_relabel_invariance(self):
        rng = np.random.default_rng(7)
        X, cl, sizes = toy(rng)
        Y = rng.normal(size=X.shape[:2])
        w = weights(cl, sizes, "cwgee")
        relabel = rng.permutation(cl.max() + 1) * 7 + 3
        a = gee(X, Y, w, cl, "ar1")
        b = gee(X, Y, w, relabel[cl], "ar1")
        assert_allclose(a[1], b[1], rtol=1e-12)

    def test_psd(self):
        rng = np.random.default_rng(8)
        X, cl, sizes = toy(rng)
        Y = rng.normal(size=X.shape[:2])
        cov = gee(X, Y, weights(cl, sizes, "cwgee"), cl, "ar1")[1]
        assert_allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > -1e-12

    def test_covariate_scaling(self):
        rng = np.random.default_rng(9)
        X, cl, sizes = toy(rng)
        Y = rng.normal(size=X.shape[:2])
        w = weights(cl, sizes, "cwgee")
        a = gee(X, Y, w, cl, "ar1")
        Xs = X.copy()
        Xs[:, :, 4] *= 10.0
        b = gee(Xs, Y, w, cl, "ar1")
        assert_allclose(b[0][4], a[0][4] / 10, rtol=1e-8)
        za = a[0][4] / np.sqrt(a[1][4, 4])
        zb = b[0][4] / np.sqrt(b[1][4, 4])
        assert_allclose(za, zb, rtol=1e-8)


class TestQLS:
    def test_independent(self):
        rng = np.random.default_rng(10)
        rho, clamped = estimate_ar1_qls(rng.normal(size=(10_000, 5)))
        assert abs(rho) < 0.05 and not clamped

    @pytest.mark.parametrize("true", [0.5, -0.3])
    def test_ar1_recovered(self, true):
        rng = np.random.default_rng(11)
        r = 6
        L = np.linalg.cholesky(ar1_matrix(true, r))
        e = rng.normal(size=(20_000, r)) @ L.T
        rho, _ = estimate_ar1_qls(e)
        assert abs(rho - true) < 0.05

    def test_perfect_correlation_clamps(self):
        e = np.repeat(np.random.default_rng(12).normal(size=(50, 1)), 4, axis=1)
        rho, clamped = estimate_ar1_qls(e)
        assert clamped and rho == pytest.approx(1 - 1e-6)

    def test_zero_residuals(self):
        assert estimate_ar1_qls(np.zeros((5, 3))) == (0.0, False)

    def test_needs_two_times(self):
        with pytest.raises(ValueError):
            estimate_ar1_qls(np.zeros((5, 1)))

    @settings(max_examples=20, deadline=None)
    @given(rho=st.floats(-0.95, 0.95), r=st.integers(2, 8))
    def test_ar1_inverse(self, rho, r):
        assert_allclose(ar1_inverse(rho, r) @ ar1_matrix(rho, r), np.eye(r), atol=1e-8)


class TestWald:
    def make(self, beta, var):
        return GeeFit(np.array([beta]), np.array([[var]]), None, 1, True, ("x",))

    def test_zero_estimate(self):
        assert wald_test(self.make(0.0, 1.0), 0) == (0.0, 1.0)

    def test_critical_value(self):
        z, p = wald_test(self.make(1.959963984540054 * 0.5, 0.25), "x")
        assert p == pytest.approx(0.05, abs=1e-12)

    def test_zero_variance(self):
        with pytest.raises(ValueError):
            wald_test(self.make(1.0, 0.0), 0)


class TestFitGee:
    def panel(self):
        # complete data; state-1 occupancy at t=1 equals 1 - x exactly
        clusters = []
        rng = np.random.default_rng(13)
        for i in range(12):
            c = []
            for j in range(int(rng.integers(2, 5))):
                x = float((i + j) % 2)
                t = 0.5 if x else 2.0
                c.append(Subject(Trajectory(1, ((t, 3),)), (x,)))
            clusters.append(tuple(c))
        return Panel(tuple(clusters), StateSpace.illness_death(), ("x",))

    @pytest.mark.parametrize("scheme", ["none", "inverse-cluster"])
    def test_exact_pipeline(self, scheme):
        p = self.panel()
        pv = (pseudo_method1 if scheme == "none" else pseudo_method2)(p, 1, [1.0])
        fit = fit_gee(pv, p, ModelSpec(("x",), (1.0,), "independence", scheme))
        assert_allclose(fit.beta, [1.0, -1.0], atol=1e-10)
        rows = coefficient_table(fit)
        assert [r["term"] for r in rows] == ["(Intercept)", "x"]
        assert set(rows[0]) == {"term", "Estimate", "SE", "p-value"}

    def test_grid_mismatch(self):
        p = self.panel()
        pv = PseudoValueSet(np.zeros((p.num_subjects, 1)), Method.METHOD1, 1, np.array([1.0]), p.arrays.cluster, None)
        with pytest.raises(ValueError, match="grid"):
            fit_gee(pv, p, ModelSpec(("x",), (2.0,)))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ModelSpec(("x",), (1.0,), "ar1")
        spec = ModelSpec(("x",), (1.0, 2.0), "ar1")
        assert spec.coefficient_names == ("(Intercept)@1.0", "(Intercept)@2.0", "x")
        assert ModelSpec(("x",), (1.0, 2.0), time_intercepts=False).coefficient_names == ("(Intercept)", "x")
