"""Nelson-Aalen intensities, Aalen-Johansen transition matrices and state
occupation probabilities for (possibly reweighted) clustered multistate data.

All estimators take a :class:`~pseudoics.panel.WeightScheme`; with inverse
cluster size weights every cluster contributes the same total mass, which
targets the occupation probability of a typical subject in a typical cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .panel import (
    Panel,
    StepFunction,
    WeightScheme,
    at_risk,
    censoring_km,
    subject_weights,
    transition_increments,
)

_ROW_REPAIR_TOL = 1e-8


@dataclass(frozen=True)
class IntensityPath:
    """Increments ``dA(u)`` of the cumulative transition intensity matrix."""

    jump_times: np.ndarray
    increments: np.ndarray  # (K, Q, Q)

    @property
    def num_states(self) -> int:
        return self.increments.shape[1]

    def cumulative(self, t: float) -> np.ndarray:
        """``A(t)``, the summed increments up to and including ``t``."""
        k = np.searchsorted(self.jump_times, t, side="right")
        return self.increments[:k].sum(axis=0)


@dataclass(frozen=True)
class SopCurve:
    """State occupation probabilities evaluated on a time grid.

    ``curves[l]`` is the full step function for state ``l + 1``; ``values`` is
    the grid evaluation with one row per grid time.
    """

    grid: np.ndarray
    values: np.ndarray  # (len(grid), Q)
    curves: tuple
    weight_scheme: WeightScheme

    def state(self, state: int) -> StepFunction:
        return self.curves[state - 1]

    def at(self, t) -> np.ndarray:
        return np.stack([np.atleast_1d(c(t)) for c in self.curves], axis=-1).squeeze()


def nelson_aalen(panel: Panel, weights: WeightScheme | str = WeightScheme.UNWEIGHTED) -> IntensityPath:
    """Weighted Nelson-Aalen increments built from ``N_{ll'}`` and ``M_l``.

    Times where ``M_l(u) = 0`` contribute nothing for row ``l``.
    """
    weights = WeightScheme.parse(weights)
    Q = panel.state_space.num_states
    arr = panel.arrays
    times = np.unique(arr.tr_time)
    inc = np.zeros((times.size, Q, Q))
    if times.size == 0:
        return IntensityPath(times, inc)
    K = censoring_km(panel, weights)
    present = set(zip(arr.tr_from.tolist(), arr.tr_to.tolist()))
    for frm in range(Q):
        targets = [to for to in range(Q) if (frm, to) in present]
        if not targets:
            continue
        M = np.atleast_1d(at_risk(panel, frm + 1, weights, K)(times))
        pos = M > 0
        for to in targets:
            jumps, dn = transition_increments(panel, frm + 1, to + 1, weights, K)
            dN = np.zeros(times.size)
            dN[np.searchsorted(times, jumps)] = dn
            inc[pos, frm, to] = dN[pos] / M[pos]
        inc[:, frm, frm] = -inc[:, frm, :].sum(axis=1)
    return IntensityPath(times, inc)


def _factor(increment: np.ndarray) -> np.ndarray:
    f = np.eye(increment.shape[0]) + increment
    if np.any(f < -1e-10) or np.any(f > 1 + 1e-10) or np.any(np.abs(f.sum(axis=1) - 1) > 1e-10):
        raise ValueError("invalid intensity increment")
    return f


def _repair_rows(P: np.ndarray) -> np.ndarray:
    sums = P.sum(axis=-1, keepdims=True)
    dev = np.abs(sums - 1.0)
    if np.any(dev > _ROW_REPAIR_TOL):
        raise ValueError(f"transition matrix rows drifted by {float(dev.max()):.3g}")
    return P / sums


def aalen_johansen(intensity: IntensityPath, s: float, t: float) -> np.ndarray:
    """Product integral ``P(s, t)`` of ``I + dA(u)`` over jump times in ``(s, t]``."""
    if s > t:
        raise ValueError("aalen_johansen needs s <= t")
    Q = intensity.num_states
    lo = np.searchsorted(intensity.jump_times, s, side="right")
    hi = np.searchsorted(intensity.jump_times, t, side="right")
    P = np.eye(Q)
    for k in range(lo, hi):
        P = P @ _factor(intensity.increments[k])
    return _repair_rows(P)


def initial_distribution(panel: Panel, weights: WeightScheme | str = WeightScheme.UNWEIGHTED) -> np.ndarray:
    """Weighted, renormalised proportions of subjects by initial state."""
    arr = panel.arrays
    if arr.init.size == 0:
        raise ValueError("empty initial distribution")
    w = subject_weights(panel, weights)
    pi0 = np.bincount(arr.init, weights=w, minlength=panel.state_space.num_states)
    total = pi0.sum()
    if total <= 0:
        raise ValueError("empty initial distribution")
    return pi0 / total


def state_occupation(panel: Panel, weights: WeightScheme | str, t: float) -> np.ndarray:
    """Occupation probabilities ``pi_l(t)`` of all states at time ``t``."""
    pi0 = initial_distribution(panel, weights)
    P = aalen_johansen(nelson_aalen(panel, weights), 0.0, t)
    return pi0 @ P


def _occupation_path(panel: Panel, weights: WeightScheme) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pi0 = initial_distribution(panel, weights)
    na = nelson_aalen(panel, weights)
    path = np.empty((na.jump_times.size, pi0.size))
    v = pi0.copy()
    for k in range(na.jump_times.size):
        v = v @ _factor(na.increments[k])
        path[k] = v
    return pi0, na.jump_times, path


def sop_curve(panel: Panel, weights: WeightScheme | str, grid) -> SopCurve:
    """State occupation curves for every state, evaluated on ``grid``."""
    weights = WeightScheme.parse(weights)
    grid = np.asarray(grid, dtype=float)
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be increasing")
    pi0, times, path = _occupation_path(panel, weights)
    path = _repair_rows(path) if path.size else path
    curves = tuple(StepFunction(times, path[:, q], pi0[q]) for q in range(pi0.size))
    values = np.stack([np.atleast_1d(c(grid)) for c in curves], axis=1)
    return SopCurve(grid, values, curves, weights)


__all__ = [
    "IntensityPath",
    "SopCurve",
    "aalen_johansen",
    "initial_distribution",
    "nelson_aalen",
    "sop_curve",
    "state_occupation",
]
