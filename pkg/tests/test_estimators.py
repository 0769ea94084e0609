import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from pseudoics.estimators import (
    aalen_johansen,
    initial_distribution,
    nelson_aalen,
    sop_curve,
    state_occupation,
)
from pseudoics.panel import Panel, StateSpace, Subject, Trajectory, subject_weights

from _helpers import event_km, random_panel, two_state_panel

SCHEMES = ["none", "inverse-cluster"]


def aj_oracle(panel, scheme, t):
    """Aalen-Johansen built from plain weighted at-risk sums, with no censoring weights.

    The censoring survival multiplies numerator and denominator of every
    intensity increment alike, so this must agree with the weighted estimator.
    """
    w = subject_weights(panel, scheme)
    Q = panel.state_space.num_states
    subjects = [s for _, _, s in panel.subjects()]
    times = sorted({u for s in subjects for u, _ in s.trajectory.transitions if u <= t})
    pi = np.zeros(Q)
    for s, wi in zip(subjects, w):
        pi[s.trajectory.initial_state - 1] += wi
    pi /= pi.sum()
    for u in times:
        Y = np.zeros(Q)
        N = np.zeros((Q, Q))
        for s, wi in zip(subjects, w):
            tr = s.trajectory
            if not (tr.truncation_time < u <= tr.censor_time):
                continue
            state = tr.initial_state
            for v, to in tr.transitions:
                if v < u:
                    state = to
                elif v == u:
                    N[state - 1, to - 1] += wi
            if state not in panel.state_space.absorbing:
                Y[state - 1] += wi
        F = np.eye(Q)
        for l in range(Q):
            if Y[l] > 0:
                F[l] += N[l] / Y[l]
                F[l, l] -= N[l].sum() / Y[l]
        pi = pi @ F
    return pi


class TestAgainstOracle:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_sop_matches_loop_oracle(self, seed, scheme):
        p = random_panel(seed, ties=seed % 3 == 0, truncation=seed % 2 == 1)
        for t in (0.3, 0.8, 1.5, 3.0):
            assert_allclose(state_occupation(p, scheme, t), aj_oracle(p, scheme, t), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_two_state_is_one_minus_km(self, seed, scheme):
        p = two_state_panel(seed)
        grid = np.linspace(0.1, 3.0, 12)
        sop = sop_curve(p, scheme, grid).values[:, 1]
        km = np.array([event_km(p, scheme, t) for t in grid])
        assert_allclose(sop, 1 - km, atol=1e-12)


class TestCompleteData:
    def test_empirical_fractions(self):
        p = random_panel(4, m=8, censor=False)
        grid = np.array([0.2, 0.7, 1.3, 2.5])
        sop = sop_curve(p, "none", grid).values
        for k, t in enumerate(grid):
            states = [s.trajectory.state_at(t) for _, _, s in p.subjects()]
            assert_allclose(sop[k], np.bincount(states, minlength=4)[1:] / len(states), atol=1e-12)

    def test_weighted_fractions(self):
        p = random_panel(5, m=8, censor=False)
        w = subject_weights(p, "inverse-cluster")
        t = 1.1
        states = np.array([s.trajectory.state_at(t) for _, _, s in p.subjects()])
        ref = np.array([w[states == q].sum() for q in (1, 2, 3)]) / w.sum()
        assert_allclose(state_occupation(p, "inverse-cluster", t), ref, atol=1e-12)


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6), scheme=st.sampled_from(SCHEMES),
           ties=st.booleans(), trunc=st.booleans())
    def test_rows_stochastic(self, seed, scheme, ties, trunc):
        p = random_panel(seed, ties=ties, truncation=trunc)
        na = nelson_aalen(p, scheme)
        for s, t in ((0.0, 0.5), (0.0, 2.0), (0.5, 10.0)):
            P = aalen_johansen(na, s, t)
            assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)
            assert np.all(P >= -1e-12)
        sop = sop_curve(p, scheme, np.linspace(0.05, 4, 15)).values
        assert_allclose(sop.sum(axis=1), 1.0, atol=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_chapman_kolmogorov(self, seed):
        na = nelson_aalen(random_panel(seed), "inverse-cluster")
        assert_allclose(aalen_johansen(na, 0, 0.6) @ aalen_johansen(na, 0.6, 2.0),
                        aalen_johansen(na, 0, 2.0), atol=1e-12)

    def test_equal_cluster_sizes_weighting_irrelevant(self):
        p0 = random_panel(11, m=6, max_size=6)
        # trim every cluster to its first two members
        p = Panel(tuple(c[:2] for c in p0.clusters if len(c) >= 2), p0.state_space, p0.covariate_names)
        grid = np.linspace(0.1, 3, 9)
        assert_allclose(sop_curve(p, "none", grid).values, sop_curve(p, "inverse-cluster", grid).values,
                        atol=1e-12)


class TestEdges:
    def test_initial_distribution(self):
        p = random_panel(0)
        assert_allclose(initial_distribution(p), [1, 0, 0])

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            aalen_johansen(nelson_aalen(random_panel(0)), 2.0, 1.0)

    def test_identity_before_first_event(self):
        na = nelson_aalen(random_panel(0))
        assert_allclose(aalen_johansen(na, 0.0, 1e-9), np.eye(3))

    def test_cumulative_hazard(self):
        # one subject at risk, one event: cumulative intensity one
        p = Panel(((Subject(Trajectory(1, ((1.0, 3),))),),), StateSpace.illness_death())
        na = nelson_aalen(p)
        assert_allclose(na.cumulative(2.0)[0, 2], 1.0)
        assert math.isclose(na.cumulative(0.5)[0, 2], 0.0)
