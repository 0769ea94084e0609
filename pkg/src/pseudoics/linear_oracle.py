"""Linear random-effects model used to check why cluster weighting is needed.

Responses are ``Y_ij = mu + nu_i + eps_ij`` with cluster size
``n_i = h(nu_i)``.  Jackknifing the grand mean (one-stage) or the mean of
cluster means (two-stage) returns the responses themselves, so the
pseudo-value estimating function ``sum_j w_ij (Y~_ij - mu)`` has mean zero
only when the weights undo the size bias, i.e. ``w_ij = 1/n_i``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np


def informative_size(nu, a: float = 3.0, b: float = 5.0, floor: int = 2):
    """Cluster size ``ceil(exp(a + b nu)) + 2``, never below ``floor``."""
    n = np.ceil(np.exp(a + b * np.asarray(nu, dtype=float))) + 2
    return np.maximum(n, floor).astype(np.int64)


@dataclass(frozen=True)
class LinearConfig:
    """Settings of the linear oracle.

    ``size_a`` and ``size_b`` parameterise ``h(nu) = ceil(exp(a + b nu)) + 2``;
    setting ``constant_size`` replaces ``h`` by a fixed, non-informative size.
    Sizes are clipped below at 2.
    """

    m: int = 10
    mu: float = 0.0
    sigma_alpha: float = 0.25
    sigma_eps: float = 1.0
    size_a: float = 3.0
    size_b: float = 5.0
    constant_size: int | None = None
    seed: int = 20240101

    def __post_init__(self):
        if not (self.sigma_alpha > 0 and self.sigma_eps > 0):
            raise ValueError("sigma_alpha and sigma_eps must be positive")
        if self.m < 2:
            raise ValueError("need at least two clusters")
        if self.constant_size is not None and self.constant_size < 2:
            raise ValueError("constant cluster size must be at least 2")

    def sizes(self, nu: np.ndarray) -> np.ndarray:
        if self.constant_size is not None:
            return np.full(np.shape(nu), self.constant_size, dtype=np.int64)
        return informative_size(nu, self.size_a, self.size_b)


@dataclass(frozen=True)
class LinearPanel:
    y: np.ndarray
    cluster: np.ndarray
    sizes: np.ndarray
    nu: np.ndarray


def simulate_linear(cfg: LinearConfig, replicate: int = 0) -> LinearPanel:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(replicate,))))
    nu = rng.normal(0.0, cfg.sigma_alpha, cfg.m)
    sizes = cfg.sizes(nu)
    cluster = np.repeat(np.arange(cfg.m), sizes)
    y = cfg.mu + nu[cluster] + rng.normal(0.0, cfg.sigma_eps, cluster.size)
    return LinearPanel(y, cluster, sizes, nu)


def jackknife_mu1(y: np.ndarray) -> np.ndarray:
    """One-stage pseudo-values ``n mu1 - (n-1) mu1_{-ij}`` of the grand mean."""
    n = y.size
    if n < 2:
        raise ValueError("jackknife undefined")
    total = y.sum()
    loo = (total - y) / (n - 1)
    return n * (total / n) - (n - 1) * loo


def jackknife_mu2(y: np.ndarray, cluster: np.ndarray) -> np.ndarray:
    """Two-stage pseudo-values of the mean of cluster means.

    ``m {n_i mu2 - (n_i-1) mu2_{-ij}} - (m-1) mu2_{-i}``, where ``mu2_{-ij}``
    keeps cluster ``i`` with its remaining members.
    """
    _, cl = np.unique(cluster, return_inverse=True)
    m = cl.max() + 1
    if m < 2:
        raise ValueError("cluster jackknife undefined")
    sizes = np.bincount(cl)
    sums = np.bincount(cl, weights=y)
    means = sums / sizes
    mu2 = means.mean()
    minus_i = (means.sum() - means) / (m - 1)
    ni = sizes[cl]
    with np.errstate(invalid="ignore", divide="ignore"):
        reduced = np.where(ni > 1, (sums[cl] - y) / (ni - 1), np.nan)
    minus_ij = np.where(ni > 1, mu2 + (reduced - means[cl]) / m, minus_i[cl])
    return m * (ni * mu2 - (ni - 1) * minus_ij) - (m - 1) * minus_i[cl]


def linear_pseudo(cfg: LinearConfig, estimator: str, replicate: int = 0):
    """Pseudo-values of one simulated panel for ``mu1`` or ``mu2``.

    Returns ``(pseudo, panel)``.
    """
    panel = simulate_linear(cfg, replicate)
    if estimator == "mu1":
        return jackknife_mu1(panel.y), panel
    if estimator == "mu2":
        return jackknife_mu2(panel.y, panel.cluster), panel
    raise ValueError(f"unknown estimator {estimator!r}")


@dataclass(frozen=True)
class EstfunReport:
    weight: str
    estimator: str
    replicates: int
    mean: float
    se: float
    config: dict

    @property
    def z(self) -> float:
        if self.se > 0:
            return self.mean / self.se
        return 0.0 if self.mean == 0 else math.copysign(math.inf, self.mean)

    def to_json(self) -> str:
        d = asdict(self)
        d["z"] = self.z
        return json.dumps(d, indent=2, sort_keys=True)


def estfun_expectation_mc(cfg: LinearConfig, weight: str, replicates: int = 10_000,
                          estimator: str | None = None) -> EstfunReport:
    """Monte Carlo mean of the per-cluster estimating function ``sum_j w_ij (Y~_ij - mu)``.

    ``weight`` is ``"one"`` or ``"inv_n"``.  Pseudo-values come from the
    one-stage jackknife for ``"one"`` and the two-stage jackknife for
    ``"inv_n"`` unless ``estimator`` says otherwise.  Each replicate
    contributes the average over its clusters; the standard error is taken
    across replicates.
    """
    if replicates < 1000:
        raise ValueError("need at least 1000 replicates")
    if weight not in ("one", "inv_n"):
        raise ValueError(f"unknown weight {weight!r}")
    estimator = estimator or ("mu1" if weight == "one" else "mu2")
    per_rep = np.empty(replicates)
    for r in range(replicates):
        pseudo, panel = linear_pseudo(cfg, estimator, r)
        w = 1.0 if weight == "one" else 1.0 / panel.sizes[panel.cluster]
        u = np.bincount(panel.cluster, weights=w * (pseudo - cfg.mu), minlength=cfg.m)
        per_rep[r] = u.mean()
    mean = float(per_rep.mean())
    se = float(per_rep.std(ddof=1) / math.sqrt(replicates))
    return EstfunReport(weight, estimator, replicates, mean, se, asdict(cfg))


__all__ = [
    "EstfunReport",
    "LinearConfig",
    "LinearPanel",
    "estfun_expectation_mc",
    "informative_size",
    "jackknife_mu1",
    "jackknife_mu2",
    "linear_pseudo",
    "simulate_linear",
]
