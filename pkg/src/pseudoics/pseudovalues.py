"""Jackknife pseudo-values for state occupation probabilities.

Two constructions are offered and each is tied to its estimator:

* method 1 jackknifes the unweighted estimator over the ``n`` subjects,
  ``Y_ij = n pi(t) - (n-1) pi_{-ij}(t)``;
* method 2 jackknifes the inverse-cluster-size weighted estimator in two
  stages, first over clusters and then over subjects within a cluster,
  ``Y_ij = m {n_i pi(t) - (n_i-1) pi_{-ij}(t)} - (m-1) pi_{-i}(t)``.

Pairing method 1 with a weighted estimator is not exposed.  Each leave-out
estimate re-runs the whole estimator on the reduced data, including its
censoring survival curve.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _loo
from .estimators import sop_curve
from .panel import Panel, WeightScheme, check_panel


class Method(enum.Enum):
    METHOD1 = "method1"
    METHOD2 = "method2"

    @property
    def estimator_weights(self) -> WeightScheme:
        if self is Method.METHOD1:
            return WeightScheme.UNWEIGHTED
        return WeightScheme.INVERSE_CLUSTER_SIZE

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace(" ", "").replace("_", "")
        if v in ("method1", "1", "m1", "uw", "unweighted"):
            return cls.METHOD1
        if v in ("method2", "2", "m2", "w", "weighted"):
            return cls.METHOD2
        raise ValueError(f"unknown pseudo-value method {value!r}")


@dataclass(frozen=True)
class PseudoValueSet:
    """Pseudo-values of one state, one row per subject and one column per grid time.

    Rows follow :meth:`Panel.subjects` order; ``cluster`` and ``subject`` give
    the cluster index and within-cluster position of every row.
    """

    values: np.ndarray
    method: Method
    state: int
    grid: np.ndarray
    cluster: np.ndarray
    subject: np.ndarray


def default_grid(panel: Panel, r: int = 10) -> np.ndarray:
    """``r`` equally spaced quantiles of the observed transition times."""
    times = panel.arrays.tr_time
    if times.size == 0:
        raise ValueError("no observed transitions to place a grid on")
    probs = np.arange(1, r + 1) / (r + 1)
    grid = np.unique(np.quantile(times, probs))
    return grid


def _grid(grid) -> np.ndarray:
    g = np.atleast_1d(np.asarray(grid, dtype=float))
    if g.size == 0 or np.any(np.diff(g) <= 0):
        raise ValueError("grid must be a nonempty increasing sequence")
    return g


def _positions(panel: Panel):
    arr = panel.arrays
    subj = np.concatenate([np.arange(len(c)) for c in panel.clusters]) if panel.num_subjects else np.empty(0, int)
    return arr.cluster.copy(), subj


def jackknife_method1(panel: Panel, grid, *, tree_threshold: int = 8) -> np.ndarray:
    """Method 1 pseudo-values for all states, shape ``(n, len(grid), Q)``."""
    grid = _grid(grid)
    n = panel.num_subjects
    if n < 2:
        raise ValueError("jackknife undefined")
    full, loo = _loo.loo_unweighted(panel, grid, tree_threshold)
    return n * full[None] - (n - 1) * loo


def jackknife_method2(panel: Panel, grid, *, tree_threshold: int = 8) -> np.ndarray:
    """Method 2 pseudo-values for all states, shape ``(n, len(grid), Q)``."""
    grid = _grid(grid)
    m = panel.num_clusters
    if m < 2:
        raise ValueError("cluster jackknife undefined")
    full, minus_c, minus_s = _loo.loo_cluster_weighted(panel, grid, tree_threshold)
    ci = panel.arrays.cluster
    ni = panel.cluster_sizes[ci].astype(float)[:, None, None]
    return m * (ni * full[None] - (ni - 1) * minus_s) - (m - 1) * minus_c[ci]


def jackknife(panel: Panel, grid, method) -> np.ndarray:
    method = Method.parse(method)
    if method is Method.METHOD1:
        return jackknife_method1(panel, grid)
    return jackknife_method2(panel, grid)


def pseudo_set(panel: Panel, values: np.ndarray, method, state: int, grid) -> PseudoValueSet:
    """Wrap the ``(n, r, Q)`` output of a jackknife as the set for one state."""
    method = Method.parse(method)
    Q = panel.state_space.num_states
    if not 1 <= state <= Q:
        raise ValueError(f"state {state} outside 1..{Q}")
    cl, sj = _positions(panel)
    return PseudoValueSet(values[:, :, state - 1], method, state, _grid(grid), cl, sj)


def pseudo_method1(panel: Panel, state: int, grid) -> PseudoValueSet:
    """Method 1 pseudo-values of ``state`` from the unweighted estimator."""
    check_panel(panel)
    return pseudo_set(panel, jackknife_method1(panel, grid), Method.METHOD1, state, grid)


def pseudo_method2(panel: Panel, state: int, grid) -> PseudoValueSet:
    """Method 2 pseudo-values of ``state`` from the inverse cluster size weighted estimator."""
    check_panel(panel)
    return pseudo_set(panel, jackknife_method2(panel, grid), Method.METHOD2, state, grid)


def pseudo_values(panel: Panel, state: int, grid, method) -> PseudoValueSet:
    method = Method.parse(method)
    if method is Method.METHOD1:
        return pseudo_method1(panel, state, grid)
    return pseudo_method2(panel, state, grid)


# Naive re-estimation: every leave-out panel is rebuilt and estimated from
# scratch with the full estimator.  Used to check the fast path.

def _sop(panel: Panel, scheme: WeightScheme, grid: np.ndarray) -> np.ndarray:
    return sop_curve(panel, scheme, grid).values


def naive_method1(panel: Panel, grid) -> np.ndarray:
    grid = _grid(grid)
    n = panel.num_subjects
    if n < 2:
        raise ValueError("jackknife undefined")
    scheme = WeightScheme.UNWEIGHTED
    full = _sop(panel, scheme, grid)
    out = np.empty((n, grid.size, panel.state_space.num_states))
    for k, (i, j, _) in enumerate(panel.subjects()):
        out[k] = n * full - (n - 1) * _sop(panel.drop(i, j), scheme, grid)
    return out


def naive_method2(panel: Panel, grid) -> np.ndarray:
    grid = _grid(grid)
    m = panel.num_clusters
    if m < 2:
        raise ValueError("cluster jackknife undefined")
    scheme = WeightScheme.INVERSE_CLUSTER_SIZE
    full = _sop(panel, scheme, grid)
    minus_c = [_sop(panel.drop(i), scheme, grid) for i in range(m)]
    out = np.empty((panel.num_subjects, grid.size, panel.state_space.num_states))
    for k, (i, j, _) in enumerate(panel.subjects()):
        ni = len(panel.clusters[i])
        minus_s = _sop(panel.drop(i, j), scheme, grid)
        out[k] = m * (ni * full - (ni - 1) * minus_s) - (m - 1) * minus_c[i]
    return out


__all__ = [
    "Method",
    "PseudoValueSet",
    "default_grid",
    "jackknife",
    "jackknife_method1",
    "jackknife_method2",
    "naive_method1",
    "naive_method2",
    "pseudo_method1",
    "pseudo_method2",
    "pseudo_set",
    "pseudo_values",
]
