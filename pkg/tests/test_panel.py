import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from pseudoics.panel import (
    Panel,
    StateSpace,
    StepFunction,
    Subject,
    Trajectory,
    WeightScheme,
    at_risk,
    censoring_km,
    counting_process,
    make_panel,
    running_total,
    stable_cumsum,
    subject_weights,
    validate_panel,
)

from _helpers import random_panel


def subj(init, path=(), c=math.inf, lt=0.0, z=(), group=None):
    return Subject(Trajectory(init, tuple(path), c, lt), z, group)


def km_oracle(times, observed, weights):
    """Plain loop Kaplan-Meier with events before censoring at ties."""
    out = {}
    s = 1.0
    for t in sorted(set(np.asarray(times)[np.asarray(observed)])):
        risk = sum(w for u, w in zip(times, weights) if u >= t)
        d = sum(w for u, o, w in zip(times, observed, weights) if o and u == t)
        s *= 1.0 - d / risk
        out[t] = s
    return out


class TestStateSpace:
    def test_illness_death(self):
        sp = StateSpace.illness_death()
        assert sp.num_states == 3
        assert sp.absorbing == frozenset({3})
        assert list(sp.states) == [1, 2, 3]

    def test_rejects_bad_absorbing(self):
        with pytest.raises(ValueError):
            StateSpace(2, frozenset({3}))

    def test_rejects_single_state(self):
        with pytest.raises(ValueError):
            StateSpace(1)


class TestStepFunction:
    def test_right_continuous(self):
        f = StepFunction([1.0, 2.0], [0.5, 0.25], 1.0)
        assert_allclose(f([0.0, 1.0, 1.5, 2.0, 3.0]), [1.0, 0.5, 0.5, 0.25, 0.25])
        assert f.left_limit(1.0) == 1.0
        assert f.right_limit(1.0) == 0.5
        assert f.final_value == 0.25

    def test_left_continuous(self):
        f = StepFunction([1.0, 2.0], [3.0, 0.0], 0.0, left_continuous=True)
        assert_allclose(f([1.0, 1.5, 2.0, 2.5]), [0.0, 3.0, 3.0, 0.0])

    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            StepFunction([2.0, 1.0], [0.0, 1.0])

    def test_empty(self):
        f = StepFunction([], [], 0.7)
        assert f(5.0) == 0.7
        assert f.final_value == 0.7


class TestTrajectory:
    def test_state_at(self):
        tr = Trajectory(1, ((1.0, 2), (3.0, 3)))
        assert [tr.state_at(t) for t in (0.5, 1.0, 2.0, 3.0, 9.0)] == [1, 2, 2, 3, 3]
        assert tr.states() == [1, 2, 3]


class TestValidation:
    space = StateSpace.illness_death()

    def rules(self, s):
        return [v.rule for v in validate_panel(Panel(((s,),), self.space))]

    def test_valid(self):
        assert self.rules(subj(1, [(1.0, 2), (2.0, 3)])) == []

    def test_non_monotone(self):
        assert "non-monotone times" in self.rules(subj(1, [(2.0, 2), (1.0, 3)]))

    def test_out_of_absorbing(self):
        assert "transition out of absorbing state 3" in self.rules(subj(1, [(1.0, 3), (2.0, 2)], c=5.0))

    def test_never_ends(self):
        assert any("follow-up never ends" in r for r in self.rules(subj(1, [(1.0, 2)])))

    def test_transition_after_censoring(self):
        assert "transition after censoring time" in self.rules(subj(1, [(2.0, 2)], c=1.0))

    def test_truncation(self):
        assert "transition at or before truncation time" in self.rules(subj(1, [(1.0, 3)], lt=1.5))

    def test_make_panel_raises(self):
        with pytest.raises(ValueError, match="invalid panel"):
            make_panel([[subj(1, [(1.0, 2)])]], self.space)


class TestPanel:
    def test_drop_subject_and_cluster(self):
        p = random_panel(3, m=4, max_size=4)
        sizes = p.cluster_sizes
        i = int(np.argmax(sizes))
        q = p.drop(i, 0)
        assert q.num_subjects == p.num_subjects - 1
        assert q.num_clusters == p.num_clusters
        r = p.drop(i)
        assert r.num_clusters == p.num_clusters - 1
        assert r.num_subjects == p.num_subjects - sizes[i]

    def test_drop_last_member_removes_cluster(self):
        p = Panel(((subj(1, [(1.0, 3)]),), (subj(1, [(2.0, 3)]), subj(1, [(3.0, 3)]))), StateSpace.illness_death())
        assert p.drop(0, 0).num_clusters == 1

    def test_arrays(self):
        s = subj(1, [(1.0, 2), (2.0, 3)], z=(0.5,))
        t = subj(1, [(1.5, 2)], c=4.0, lt=0.5, z=(1.0,))
        p = Panel(((s, t),), StateSpace.illness_death(), ("x",))
        a = p.arrays
        assert_array_equal(a.exit, [2.0, 4.0])
        assert_array_equal(a.censored, [False, True])
        assert_array_equal(a.sp_start, [0.0, 1.0, 0.5, 1.5])
        assert_array_equal(a.sp_end, [1.0, 2.0, 1.5, 4.0])
        assert_array_equal(a.sp_to, [1, 2, 1, -1])


class TestWeights:
    def test_inverse_cluster(self):
        p = random_panel(1, m=5)
        w = subject_weights(p, WeightScheme.INVERSE_CLUSTER_SIZE)
        assert_allclose(np.bincount(p.arrays.cluster, weights=w), np.ones(p.num_clusters))

    def test_inverse_group(self):
        c = (subj(1, [(1.0, 3)], group=0), subj(1, [(2.0, 3)], group=1), subj(1, [(3.0, 3)], group=1))
        d = (subj(1, [(1.0, 3)], group=1), subj(1, [(2.0, 3)], group=1))
        p = Panel((c, d), StateSpace.illness_death())
        assert_allclose(subject_weights(p, "inverse-group"), [0.5, 0.25, 0.25, 0.5, 0.5])

    def test_group_needs_labels(self):
        with pytest.raises(ValueError):
            subject_weights(random_panel(0), "inverse-group")

    def test_parse(self):
        assert WeightScheme.parse("none") is WeightScheme.UNWEIGHTED
        with pytest.raises(ValueError):
            WeightScheme.parse("bogus")


class TestCensoringKM:
    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("scheme", ["none", "inverse-cluster"])
    def test_matches_loop_oracle(self, seed, scheme):
        p = random_panel(seed, m=6, ties=bool(seed % 2))
        a = p.arrays
        w = subject_weights(p, scheme)
        ref = km_oracle(a.exit.tolist(), a.censored.tolist(), w.tolist())
        K = censoring_km(p, scheme)
        for t, v in ref.items():
            assert_allclose(K(t), v, rtol=1e-12)

    def test_no_censoring(self):
        p = random_panel(0, censor=False)
        assert censoring_km(p)(100.0) == 1.0


class TestCountingProcess:
    def test_hand_example(self):
        # two subjects still followed at 1.5, so K drops to 1/2 after the censoring
        s = [subj(1, [(1.0, 3)]), subj(1, [], c=1.5), subj(1, [(2.0, 2), (3.0, 3)])]
        p = Panel((tuple(s),), StateSpace.illness_death())
        N13 = counting_process(p, 1, 3)
        N12 = counting_process(p, 1, 2)
        assert_allclose(N13([0.5, 1.0, 5.0]), [0.0, 1.0, 1.0])
        assert_allclose(N12([1.9, 2.0]), [0.0, 2.0])
        M1 = at_risk(p, 1)
        assert_allclose(M1([0.5, 1.0, 1.2, 1.5, 1.7, 2.0, 2.1]), [3, 3, 2, 2, 2, 2, 0])
        M2 = at_risk(p, 2)
        assert_allclose(M2([2.0, 2.5, 3.0, 3.1]), [0, 2, 2, 0])

    def test_self_transition_rejected(self):
        with pytest.raises(ValueError):
            counting_process(random_panel(0), 1, 1)


class TestCompensatedSums:
    def test_small_remainder_survives(self):
        # many large weights enter and leave; one tiny weight remains
        rng = np.random.default_rng(0)
        w = rng.uniform(0.5, 2.0, 5000)
        idx = np.concatenate((np.zeros(5001, int), np.arange(1, 5001)))
        vals = np.concatenate((w, [1e-4], -w))
        out = running_total(idx, vals, 5001)
        assert out[-1] == pytest.approx(1e-4, rel=1e-12)
        assert out[0] == pytest.approx(math.fsum(w) + 1e-4, rel=1e-15)

    def test_cumsum_matches_fsum(self):
        x = np.random.default_rng(1).normal(size=(200, 3)) * 10 ** np.arange(3)
        ref = np.array([[math.fsum(x[: i + 1, j]) for j in range(3)] for i in range(200)])
        assert_allclose(stable_cumsum(x), ref, rtol=1e-15, atol=1e-15)
        assert_allclose(stable_cumsum(x[:, 0]), ref[:, 0], rtol=1e-15, atol=1e-15)

    def test_empty(self):
        assert_array_equal(running_total(np.empty(0, int), np.empty(0), 3), np.zeros(3))

    def test_long_follow_up_increment_valid(self):
        # a lone late survivor after thousands of exits keeps dN/M <= 1
        subjects = [subj(1, [(float(k + 1), 3)]) for k in range(3000)]
        subjects.append(subj(1, [(5000.0, 2)], c=6000.0))
        p = Panel((tuple(subjects[:1500]), tuple(subjects[1500:])), StateSpace.illness_death())
        M = at_risk(p, 1, "inverse-cluster")
        assert M(5000.0) == pytest.approx(1 / 1501, rel=1e-13)
