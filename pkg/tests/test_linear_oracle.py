import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from pseudoics.linear_oracle import (
    LinearConfig,
    estfun_expectation_mc,
    informative_size,
    jackknife_mu1,
    jackknife_mu2,
    simulate_linear,
)


def mean_of_means(y, cluster):
    return np.mean([y[cluster == c].mean() for c in np.unique(cluster)])


def brute_mu2(y, cluster):
    """Two-stage pseudo-values from explicit deletions."""
    m = np.unique(cluster).size
    full = mean_of_means(y, cluster)
    out = np.empty_like(y)
    for k in range(y.size):
        c = cluster[k]
        n_i = np.sum(cluster == c)
        keep_c = cluster != c
        minus_c = mean_of_means(y[keep_c], cluster[keep_c])
        if n_i > 1:
            keep = np.arange(y.size) != k
            minus_s = mean_of_means(y[keep], cluster[keep])
        else:
            minus_s = minus_c
        out[k] = m * (n_i * full - (n_i - 1) * minus_s) - (m - 1) * minus_c
    return out


clustered = st.lists(st.integers(1, 5), min_size=2, max_size=6).flatmap(
    lambda sizes: st.tuples(
        st.just(np.repeat(np.arange(len(sizes)), sizes)),
        st.lists(st.floats(-10, 10), min_size=sum(sizes), max_size=sum(sizes)).map(np.array),
    )
)


class TestJackknife:
    def test_two_cluster_hand_example(self):
        y = np.array([1.0, 3.0, 10.0])
        cl = np.array([0, 0, 1])
        assert_allclose(jackknife_mu2(y, cl), brute_mu2(y, cl), atol=1e-12)
        # mu2 = (2 + 10)/2 = 6; deleting y=1 gives (3 + 10)/2 = 6.5; deleting cluster 0 gives 10
        assert jackknife_mu2(y, cl)[0] == pytest.approx(2 * (2 * 6 - 6.5) - 10)

    @settings(max_examples=50, deadline=None)
    @given(clustered)
    def test_matches_brute_force(self, data):
        cl, y = data
        assert_allclose(jackknife_mu2(y, cl), brute_mu2(y, cl), atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(clustered)
    def test_one_stage_returns_responses(self, data):
        _, y = data
        assert_allclose(jackknife_mu1(y), y, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(clustered)
    def test_weighted_mean_preserved(self, data):
        cl, y = data
        pv = jackknife_mu2(y, cl)
        sizes = np.bincount(cl)
        assert np.mean(np.bincount(cl, weights=pv / sizes[cl])) == pytest.approx(mean_of_means(y, cl), abs=1e-9)

    def test_constant_response(self):
        cl = np.array([0, 0, 0, 1, 2, 2])
        assert_allclose(jackknife_mu2(np.full(6, 4.2), cl), 4.2, atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            jackknife_mu1(np.array([1.0]))
        with pytest.raises(ValueError):
            jackknife_mu2(np.array([1.0, 2.0]), np.array([0, 0]))


class TestSimulation:
    def test_sizes(self):
        assert_array_equal(informative_size([0.0, -10.0]), [23, 3])
        p = simulate_linear(LinearConfig(m=20, seed=1))
        assert_array_equal(p.sizes, informative_size(p.nu))
        assert_array_equal(np.bincount(p.cluster), p.sizes)

    def test_constant_size(self):
        p = simulate_linear(LinearConfig(m=5, constant_size=4))
        assert_array_equal(p.sizes, 4)

    def test_reproducible(self):
        cfg = LinearConfig(seed=3)
        assert_array_equal(simulate_linear(cfg, 2).y, simulate_linear(cfg, 2).y)

    def test_invalid(self):
        with pytest.raises(ValueError):
            LinearConfig(m=1)
        with pytest.raises(ValueError):
            LinearConfig(sigma_alpha=0.0)


class TestEstimatingFunction:
    def test_informative_unweighted_biased(self):
        r = estfun_expectation_mc(LinearConfig(seed=7), "one", 2000)
        assert r.mean > 0 and r.z > 5

    def test_informative_weighted_centred(self):
        r = estfun_expectation_mc(LinearConfig(seed=7), "inv_n", 2000)
        assert abs(r.z) < 3.5

    @pytest.mark.parametrize("weight", ["one", "inv_n"])
    def test_constant_size_centred(self, weight):
        r = estfun_expectation_mc(LinearConfig(seed=7, constant_size=10), weight, 2000)
        assert abs(r.z) < 3.5

    def test_rejects_few_replicates(self):
        with pytest.raises(ValueError):
            estfun_expectation_mc(LinearConfig(), "one", 10)
