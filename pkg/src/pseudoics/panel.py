"""Clustered multistate data and the counting-process primitives.

States are labelled ``1..Q`` throughout the public API.  A subject's
trajectory is recorded as an initial state plus the ordered list of observed
transitions ``(time, to_state)``; a right-censoring time ``C`` and a left
truncation (delayed entry) time ``L`` complete the observation scheme.

The primitives here follow the inverse-probability-of-censoring weighted
forms of the transition counting process ``N_{ll'}(t)`` and the at-risk
process ``M_l(t)``, both of which take a per-subject weight ``w_ij`` chosen
by a :class:`WeightScheme`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from numba import njit


@njit(cache=True)
def _neumaier_cumsum(x):
    out = np.empty_like(x)
    for j in range(x.shape[1]):
        s = 0.0
        c = 0.0
        for i in range(x.shape[0]):
            v = x[i, j]
            t = s + v
            if abs(s) >= abs(v):
                c += (s - t) + v
            else:
                c += (v - t) + s
            s = t
            out[i, j] = s + c
    return out


def stable_cumsum(x) -> np.ndarray:
    """Cumulative sum along the first axis with compensated summation.

    Running entries-minus-exits totals lose the small remainder to rounding
    once the running sum has been large; compensation keeps it exact to
    about one ulp of the result.
    """
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim == 1:
        return _neumaier_cumsum(x.reshape(-1, 1)).ravel()
    return _neumaier_cumsum(x)


def running_total(index, values, size: int) -> np.ndarray:
    """``out[k] = sum(values[index <= k])`` for ``k < size``, compensated.

    Each value is summed individually, so a small remainder left after many
    entries and exits is not swamped by rounding of the bulk.
    """
    index = np.asarray(index)
    if index.size == 0:
        return np.zeros(size)
    order = np.argsort(index, kind="stable")
    cs = stable_cumsum(np.asarray(values, dtype=float)[order])
    last = np.searchsorted(index[order], np.arange(size), side="right") - 1
    return np.where(last >= 0, cs[np.maximum(last, 0)], 0.0)


class UndefinedWeightError(ValueError):
    """Raised when the censoring survival ``K(t-)`` vanishes where it is needed."""


class WeightScheme(enum.Enum):
    """Per-subject weight ``w_ij`` used in the marginal estimators and GEEs."""

    UNWEIGHTED = "none"
    INVERSE_CLUSTER_SIZE = "inverse-cluster"
    INVERSE_GROUP_SIZE = "inverse-group"

    @classmethod
    def parse(cls, value: "str | WeightScheme") -> "WeightScheme":
        if isinstance(value, cls):
            return value
        aliases = {
            "none": cls.UNWEIGHTED,
            "unweighted": cls.UNWEIGHTED,
            "inverse-cluster": cls.INVERSE_CLUSTER_SIZE,
            "inverse_cluster_size": cls.INVERSE_CLUSTER_SIZE,
            "inverse-group": cls.INVERSE_GROUP_SIZE,
            "inverse_group_size": cls.INVERSE_GROUP_SIZE,
        }
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ValueError(f"unknown weight scheme {value!r}") from None


@dataclass(frozen=True)
class StateSpace:
    num_states: int
    absorbing: frozenset = frozenset()

    def __post_init__(self):
        if self.num_states < 2:
            raise ValueError("a state space needs at least two states")
        object.__setattr__(self, "absorbing", frozenset(int(s) for s in self.absorbing))
        bad = [s for s in self.absorbing if not 1 <= s <= self.num_states]
        if bad:
            raise ValueError(f"absorbing states {bad} outside 1..{self.num_states}")

    @property
    def states(self) -> range:
        return range(1, self.num_states + 1)

    @classmethod
    def illness_death(cls) -> "StateSpace":
        return cls(3, frozenset({3}))

    @classmethod
    def two_state(cls) -> "StateSpace":
        return cls(2, frozenset({2}))


@dataclass(frozen=True)
class Trajectory:
    """Observed path of one subject.

    ``transitions`` holds ``(time, to_state)`` pairs in time order; only
    transitions observed inside ``(truncation_time, censor_time]`` belong here.
    """

    initial_state: int
    transitions: tuple = ()
    censor_time: float = math.inf
    truncation_time: float = 0.0

    def __post_init__(self):
        object.__setattr__(
            self, "transitions", tuple((float(t), int(s)) for t, s in self.transitions)
        )
        object.__setattr__(self, "censor_time", float(self.censor_time))
        object.__setattr__(self, "truncation_time", float(self.truncation_time))

    def states(self) -> list[int]:
        return [self.initial_state] + [s for _, s in self.transitions]

    def state_at(self, t: float) -> int:
        """State occupied at time ``t`` (right-continuous path)."""
        state = self.initial_state
        for time, to in self.transitions:
            if time <= t:
                state = to
            else:
                break
        return state

    @property
    def last_time(self) -> float:
        return self.transitions[-1][0] if self.transitions else 0.0


@dataclass(frozen=True)
class Subject:
    trajectory: Trajectory
    covariates: tuple = ()
    group: int | None = None
    subject_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(float(z) for z in self.covariates))


@dataclass(frozen=True)
class Violation:
    cluster: int
    subject: int
    rule: str

    def __str__(self):
        return f"cluster {self.cluster}, subject {self.subject}: {self.rule}"


@dataclass(frozen=True)
class StepFunction:
    """Piecewise-constant function of time.

    By default evaluation is right-continuous, ``f(t)`` being the value at the
    largest jump time ``<= t``.  With ``left_continuous=True`` the value at the
    largest jump time ``< t`` is used instead, which is the natural form of a
    predictable process such as the at-risk count.
    """

    jump_times: np.ndarray
    values: np.ndarray
    initial_value: float = 0.0
    left_continuous: bool = False

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if jt.shape != vals.shape or jt.ndim != 1:
            raise ValueError("jump_times and values must be 1-d of equal length")
        if jt.size > 1 and np.any(np.diff(jt) <= 0):
            raise ValueError("jump_times must be strictly increasing")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "initial_value", float(self.initial_value))

    def _lookup(self, t, side):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side=side) - 1
        table = np.concatenate(([self.initial_value], self.values))
        out = table[idx + 1]
        return out if out.ndim else float(out)

    def __call__(self, t):
        return self._lookup(t, "left" if self.left_continuous else "right")

    def left_limit(self, t):
        """``f(t-)``."""
        return self._lookup(t, "left")

    def right_limit(self, t):
        """``f(t+)``."""
        return self._lookup(t, "right")

    @property
    def final_value(self) -> float:
        return float(self.values[-1]) if self.values.size else self.initial_value


@dataclass(frozen=True)
class PanelArrays:
    """Flat numpy view of a panel, one row per subject / transition / spell."""

    cluster: np.ndarray  # cluster index per subject
    group: np.ndarray  # -1 if unlabelled
    init: np.ndarray  # initial state, 0-based
    entry: np.ndarray  # L
    censor: np.ndarray  # C
    exit: np.ndarray  # end of follow-up
    censored: np.ndarray  # True if follow-up ended by censoring
    tr_subject: np.ndarray
    tr_time: np.ndarray
    tr_from: np.ndarray  # 0-based
    tr_to: np.ndarray  # 0-based
    sp_subject: np.ndarray  # at-risk spells: subject at risk in state on (start, end]
    sp_state: np.ndarray
    sp_start: np.ndarray
    sp_end: np.ndarray
    sp_to: np.ndarray  # state entered at sp_end, -1 if the spell ends by censoring
    covariates: np.ndarray


@dataclass(frozen=True)
class Panel:
    """Clusters of subjects observed under a common state space.

    Instances are immutable; derived arrays are cached on first use.
    """

    clusters: tuple
    state_space: StateSpace
    covariate_names: tuple = ()
    cluster_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(tuple(c) for c in self.clusters))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        ids = tuple(self.cluster_ids) or tuple(str(i + 1) for i in range(len(self.clusters)))
        if len(ids) != len(self.clusters):
            raise ValueError("cluster_ids must match the number of clusters")
        object.__setattr__(self, "cluster_ids", ids)

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    @property
    def num_subjects(self) -> int:
        return sum(len(c) for c in self.clusters)

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clusters], dtype=np.int64)

    def subjects(self):
        """Iterate ``(cluster_index, subject_index, subject)``."""
        for i, cluster in enumerate(self.clusters):
            for j, subj in enumerate(cluster):
                yield i, j, subj

    def drop(self, cluster: int, subject: int | None = None) -> "Panel":
        """Panel without one subject, or without a whole cluster if ``subject`` is None.

        A cluster emptied by the deletion disappears from the panel.
        """
        clusters = list(self.clusters)
        ids = list(self.cluster_ids)
        if subject is None or len(clusters[cluster]) == 1:
            del clusters[cluster]
            del ids[cluster]
        else:
            c = list(clusters[cluster])
            del c[subject]
            clusters[cluster] = tuple(c)
        return Panel(tuple(clusters), self.state_space, self.covariate_names, tuple(ids))

    @cached_property
    def arrays(self) -> PanelArrays:
        return _flatten(self)

    def weights(self, scheme: WeightScheme | str) -> np.ndarray:
        return subject_weights(self, scheme)


def _flatten(panel: Panel) -> PanelArrays:
    absorbing = panel.state_space.absorbing
    cl, grp, init, entry, cens, exit_, censored, covs = ([] for _ in range(8))
    tr_s, tr_t, tr_f, tr_to = [], [], [], []
    sp_s, sp_st, sp_a, sp_b, sp_to = [], [], [], [], []
    k = 0
    for i, _, subj in panel.subjects():
        tr = subj.trajectory
        L, C = tr.truncation_time, tr.censor_time
        cl.append(i)
        grp.append(-1 if subj.group is None else subj.group)
        init.append(tr.initial_state - 1)
        entry.append(L)
        cens.append(C)
        covs.append(subj.covariates)
        state = tr.initial_state
        prev = 0.0
        for time, to in tr.transitions:
            tr_s.append(k)
            tr_t.append(time)
            tr_f.append(state - 1)
            tr_to.append(to - 1)
            start = max(prev, L)
            if start < time:
                sp_s.append(k)
                sp_st.append(state - 1)
                sp_a.append(start)
                sp_b.append(time)
                sp_to.append(to - 1)
            prev, state = time, to
        absorbed = state in absorbing
        if absorbed:
            exit_.append(prev)
            censored.append(False)
        else:
            exit_.append(C)
            censored.append(True)
            start = max(prev, L)
            if start < C:
                sp_s.append(k)
                sp_st.append(state - 1)
                sp_a.append(start)
                sp_b.append(C)
                sp_to.append(-1)
        k += 1
    p = len(panel.covariate_names)
    i64, f64 = np.int64, float
    return PanelArrays(
        cluster=np.array(cl, dtype=i64),
        group=np.array(grp, dtype=i64),
        init=np.array(init, dtype=i64),
        entry=np.array(entry, dtype=f64),
        censor=np.array(cens, dtype=f64),
        exit=np.array(exit_, dtype=f64),
        censored=np.array(censored, dtype=bool),
        tr_subject=np.array(tr_s, dtype=i64),
        tr_time=np.array(tr_t, dtype=f64),
        tr_from=np.array(tr_f, dtype=i64),
        tr_to=np.array(tr_to, dtype=i64),
        sp_subject=np.array(sp_s, dtype=i64),
        sp_state=np.array(sp_st, dtype=i64),
        sp_start=np.array(sp_a, dtype=f64),
        sp_end=np.array(sp_b, dtype=f64),
        sp_to=np.array(sp_to, dtype=i64),
        covariates=np.array(covs, dtype=f64).reshape(len(cl), p),
    )


def subject_weights(panel: Panel, scheme: WeightScheme | str) -> np.ndarray:
    """Weight ``w_ij`` of every subject, in :meth:`Panel.subjects` order.

    For inverse group size weights a cluster with only one nonempty group gets
    ``1/(G_i n_iq)`` with ``G_i`` the number of nonempty groups, which equals
    ``1/(2 n_iq)`` whenever both groups are present.
    """
    scheme = WeightScheme.parse(scheme)
    arr = panel.arrays
    n = arr.cluster.size
    if scheme is WeightScheme.UNWEIGHTED:
        return np.ones(n)
    sizes = panel.cluster_sizes
    if scheme is WeightScheme.INVERSE_CLUSTER_SIZE:
        return 1.0 / sizes[arr.cluster]
    if np.any(arr.group < 0):
        raise ValueError("inverse group size weights need a group label on every subject")
    w = np.empty(n)
    for i in range(panel.num_clusters):
        members = np.flatnonzero(arr.cluster == i)
        labels, counts = np.unique(arr.group[members], return_counts=True)
        lookup = dict(zip(labels.tolist(), counts.tolist()))
        g = len(labels)
        w[members] = [1.0 / (g * lookup[q]) for q in arr.group[members]]
    return w


def validate_panel(panel: Panel) -> list[Violation]:
    """Check every subject against the state space and the observation rules."""
    out: list[Violation] = []
    space = panel.state_space
    p = len(panel.covariate_names)
    for i, j, subj in panel.subjects():
        tr = subj.trajectory

        def bad(rule):
            out.append(Violation(i, j, rule))

        if not 1 <= tr.initial_state <= space.num_states:
            bad(f"initial state {tr.initial_state} outside 1..{space.num_states}")
        if tr.truncation_time < 0 or math.isnan(tr.truncation_time):
            bad("negative truncation time")
        if math.isnan(tr.censor_time) or tr.censor_time <= tr.truncation_time:
            bad("censoring time not after truncation time")
        if len(subj.covariates) != p:
            bad(f"expected {p} covariates, got {len(subj.covariates)}")
        state = tr.initial_state
        prev = -math.inf
        for time, to in tr.transitions:
            if time <= prev:
                bad("non-monotone times")
            if time <= 0 or not math.isfinite(time):
                bad("transition time must be positive and finite")
            if time <= tr.truncation_time:
                bad("transition at or before truncation time")
            if time > tr.censor_time:
                bad("transition after censoring time")
            if state in space.absorbing:
                bad(f"transition out of absorbing state {state}")
            if not 1 <= to <= space.num_states:
                bad(f"state {to} outside 1..{space.num_states}")
            elif to == state:
                bad(f"self-transition in state {state}")
            prev, state = time, to
        if state not in space.absorbing and not math.isfinite(tr.censor_time):
            bad("follow-up never ends: not absorbed and not censored")
        if subj.group is not None and subj.group not in (0, 1):
            bad(f"group label {subj.group} not in {{0, 1}}")
    return out


def check_panel(panel: Panel) -> None:
    problems = validate_panel(panel)
    if problems:
        raise ValueError("invalid panel: " + "; ".join(map(str, problems[:5])))


def censoring_km(panel: Panel, weights: WeightScheme | str = WeightScheme.UNWEIGHTED) -> StepFunction:
    """Weighted Kaplan-Meier curve of the censoring time.

    Censoring is the event and reaching the absorbing state censors it.  A
    subject absorbed at exactly its censoring time counts as observed, so it
    sits in the censoring risk set at that time without contributing an event.
    """
    arr = panel.arrays
    w = subject_weights(panel, weights)
    times = arr.exit
    order = np.argsort(times, kind="stable")
    times, w_sorted, cens = times[order], w[order], arr.censored[order]
    event_times = np.unique(times[cens])
    if event_times.size == 0:
        return StepFunction(np.empty(0), np.empty(0), 1.0)
    # risk set at c: follow-up >= c
    tail = np.concatenate((np.cumsum(w_sorted[::-1])[::-1], [0.0]))
    at_risk = tail[np.searchsorted(times, event_times, side="left")]
    d = np.zeros(event_times.size)
    np.add.at(d, np.searchsorted(event_times, times[cens]), w_sorted[cens])
    surv = np.cumprod(1.0 - d / at_risk)
    surv[surv < 0] = 0.0
    return StepFunction(event_times, surv, 1.0)


def _ipcw(K: StepFunction, t: np.ndarray) -> np.ndarray:
    k = np.atleast_1d(K.left_limit(t))
    if np.any(k <= 0):
        where = float(np.atleast_1d(t)[np.argmax(k <= 0)])
        raise UndefinedWeightError(f"IPCW weight undefined at t={where!r}")
    return k


def transition_increments(
    panel: Panel,
    from_state: int,
    to_state: int,
    weights: WeightScheme | str = WeightScheme.UNWEIGHTED,
    K: StepFunction | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Jump times and sizes ``dN_{ll'}(T)`` of the weighted counting process."""
    if from_state == to_state:
        raise ValueError("from_state and to_state must differ")
    arr = panel.arrays
    if K is None:
        K = censoring_km(panel, weights)
    w = subject_weights(panel, weights)
    sel = (arr.tr_from == from_state - 1) & (arr.tr_to == to_state - 1)
    sel &= arr.tr_time <= arr.censor[arr.tr_subject]
    times = arr.tr_time[sel]
    if times.size == 0:
        return np.empty(0), np.empty(0)
    contrib = w[arr.tr_subject[sel]]
    jumps, inv = np.unique(times, return_inverse=True)
    dn = np.zeros(jumps.size)
    np.add.at(dn, inv, contrib)
    return jumps, dn / _ipcw(K, jumps)


def counting_process(
    panel: Panel,
    from_state: int,
    to_state: int,
    weights: WeightScheme | str = WeightScheme.UNWEIGHTED,
    K: StepFunction | None = None,
) -> StepFunction:
    """IPCW-weighted count ``N_{ll'}(t)`` of ``from_state -> to_state`` transitions.

    Each observed transition at ``T`` contributes ``w_ij / K(T-)``.
    """
    jumps, dn = transition_increments(panel, from_state, to_state, weights, K)
    return StepFunction(jumps, np.cumsum(dn), 0.0)


def at_risk(
    panel: Panel,
    state: int,
    weights: WeightScheme | str = WeightScheme.UNWEIGHTED,
    K: StepFunction | None = None,
) -> StepFunction:
    """IPCW-weighted number ``M_l(t)`` at risk of leaving ``state``.

    Returned as a left-continuous step function: a subject in ``state`` on
    ``(a, b]`` and under observation (``L < t <= C``) counts for ``a < t <= b``.
    """
    arr = panel.arrays
    if K is None:
        K = censoring_km(panel, weights)
    w = subject_weights(panel, weights)
    sel = arr.sp_state == state - 1
    start, end = arr.sp_start[sel], arr.sp_end[sel]
    ws = w[arr.sp_subject[sel]]
    finite_end = end[np.isfinite(end)]
    breaks = np.unique(np.concatenate((start, finite_end, K.jump_times)))
    if breaks.size == 0:
        return StepFunction(np.empty(0), np.empty(0), 0.0, left_continuous=True)
    fin = np.isfinite(end)
    idx = np.concatenate((np.searchsorted(breaks, start), np.searchsorted(breaks, end[fin])))
    active = running_total(idx, np.concatenate((ws, -ws[fin])), breaks.size)
    active[np.abs(active) < 1e-12 * max(1.0, float(ws.sum()))] = 0.0
    # on (b_k, b_{k+1}] the censoring survival K(t-) equals K(b_k)
    k_at = np.atleast_1d(K(breaks))
    need = active > 0
    if np.any(k_at[need] <= 0):
        where = float(breaks[need][np.argmax(k_at[need] <= 0)])
        raise UndefinedWeightError(f"IPCW weight undefined at t={where!r}")
    values = np.where(need, active / np.where(k_at > 0, k_at, 1.0), 0.0)
    return StepFunction(breaks, values, 0.0, left_continuous=True)


def make_panel(
    clusters: Sequence[Sequence[Subject]],
    state_space: StateSpace,
    covariate_names: Sequence[str] = (),
    cluster_ids: Sequence[str] = (),
) -> Panel:
    """Build a panel and raise if any subject breaks the data rules."""
    panel = Panel(tuple(tuple(c) for c in clusters), state_space, tuple(covariate_names), tuple(cluster_ids))
    check_panel(panel)
    return panel


__all__ = [
    "Panel",
    "PanelArrays",
    "StateSpace",
    "StepFunction",
    "Subject",
    "Trajectory",
    "UndefinedWeightError",
    "Violation",
    "WeightScheme",
    "at_risk",
    "censoring_km",
    "check_panel",
    "counting_process",
    "make_panel",
    "running_total",
    "stable_cumsum",
    "subject_weights",
    "transition_increments",
    "validate_panel",
]
