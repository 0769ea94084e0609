"""Clustered illness-death data with informative cluster sizes, and the
power and bias studies built on it.

Transition times out of state 1 follow a lognormal accelerated failure time
model with a cluster random effect ``nu_i``::

    log T1 = d1 Z1_i + d2 Z2_ij + nu_i + sigma eps_ij

A Bernoulli(p) switch sends the subject to state 2 (illness) or straight to
state 3 (death).  After illness, the time of death is drawn from the same
lognormal law (location ``d'Z``, scale ``sigma``) conditioned to exceed the
illness time.  Censoring is Weibull with a small shape so that its scale can
be tuned to a target censoring rate.

Every cluster draws from its own random substream, split deterministically
from the seed, so results do not depend on the order or process in which
clusters and replicates are generated.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .panel import Panel, StateSpace, Subject, Trajectory, UndefinedWeightError, WeightScheme
from .pseudovalues import Method, jackknife, pseudo_set
from .regression import ModelSpec, fit_gee, wald_test

PILOT_KEY = 2**31 - 1
REFERENCE_KEY = 2**31 - 2
REFERENCE_SUBJECTS = 2_000_000
PILOT_CLUSTERS = 2000


@dataclass(frozen=True)
class IcgConfig:
    """Two groups per cluster whose sizes depend on a group random effect.

    ``n_iq = Poisson(exp(a + b[q] nu_iq)) + min_size`` and ``nu_iq`` also
    shifts the log transition times of group ``q``.  ``delta_group`` is the
    true effect of membership in group 1 on the log time scale.
    """

    a: float = 2.0
    b: tuple = (0.0, 3.0)
    sigma_group: float | None = None
    delta_group: float = 0.0
    min_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(float(x) for x in self.b))
        if len(self.b) != 2:
            raise ValueError("icg needs one size slope per group")
        if self.min_size < 1:
            raise ValueError("icg group size floor must be at least 1")


@dataclass(frozen=True)
class SimConfig:
    """Data-generating settings.

    The normal laws of ``nu``, ``Z2`` and the group effects are quoted as
    ``N(mean, v)``; ``reading`` says whether ``v`` is a variance (default)
    or a standard deviation.  ``sigma_nu``, ``z2_sd`` and
    ``IcgConfig.sigma_group`` hold the resolved standard deviations.

    ``censor_scale=None`` means "calibrate to ``censor_rate``";
    ``censor_rate=0`` disables censoring.
    """

    m: int = 30
    delta: tuple = (0.0, 0.8)
    sigma_eps: float = 0.1
    sigma_nu: float | None = None
    z2_mean: float = 1.0
    z2_sd: float | None = None
    reading: str = "variance"
    branch_p: float = 0.7
    censor_shape: float = 0.1
    censor_scale: float | None = None
    censor_rate: float = 0.25
    censor_unit: str = "subject"
    ics: str = "informative"
    size_intercept: float = 3.0
    size_nu: float = 5.0
    size_z1: float = -5.0
    size_floor: int = 2
    noninformative_mean: float = 30.0
    truncation_max: float = 0.0
    icg: IcgConfig | None = None
    seed: int = 20240101
    eval_time: float = 2.0

    def __post_init__(self):
        if self.reading not in ("variance", "sd"):
            raise ValueError("reading must be 'variance' or 'sd'")
        scale = math.sqrt if self.reading == "variance" else (lambda v: v)
        if self.sigma_nu is None:
            object.__setattr__(self, "sigma_nu", scale(0.25))
        if self.z2_sd is None:
            object.__setattr__(self, "z2_sd", scale(0.15))
        if self.icg is not None and self.icg.sigma_group is None:
            object.__setattr__(self, "icg", dataclasses.replace(self.icg, sigma_group=scale(0.25)))
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        if len(self.delta) != 2:
            raise ValueError("delta must have two components")
        if not 0.0 < self.branch_p < 1.0:
            raise ValueError("branch_p must lie in (0, 1)")
        if self.m < 2:
            raise ValueError("need at least two clusters")
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")
        if self.sigma_nu < 0 or self.z2_sd < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.ics not in ("informative", "noninformative"):
            raise ValueError("ics must be 'informative' or 'noninformative'")
        if self.censor_unit not in ("subject", "cluster"):
            raise ValueError("censor_unit must be 'subject' or 'cluster'")
        if not 0.0 <= self.censor_rate < 1.0:
            raise ValueError("censor_rate must lie in [0, 1)")
        if self.censor_scale is not None and not self.censor_scale > 0:
            raise ValueError("censor_scale must be positive")
        if not self.censor_shape > 0:
            raise ValueError("censor_shape must be positive")
        if self.truncation_max < 0:
            raise ValueError("truncation_max must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _rng(seed: int, key: tuple) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# ---------------------------------------------------------------------------
# per-cluster generation

def _death_after(t12, loc, sigma, r2):
    """Lognormal(loc, sigma) time conditioned to exceed ``t12``, by inversion."""
    z = (np.log(t12) - loc) / sigma
    x = stats.truncnorm.ppf(r2, z, np.inf)
    # far upper tail: exponential approximation of the truncated normal
    bad = ~(np.isfinite(x) & (x > z))
    if np.any(bad):
        x[bad] = z[bad] - np.log1p(-r2[bad]) / np.maximum(z[bad], 1.0)
    t23 = np.exp(loc + sigma * x)
    if not np.all(t23 > t12):
        raise RuntimeError("death time not after illness time")
    return t23


def _subject_draws(cfg: SimConfig, rng, n, z1, nu, extra_loc):
    z2 = rng.normal(cfg.z2_mean, cfg.z2_sd, n)
    eps = rng.normal(size=n)
    ill = rng.random(n) < cfg.branch_p
    r2 = rng.random(n)
    loc = cfg.delta[0] * z1 + cfg.delta[1] * z2 + extra_loc
    t1 = np.exp(loc + nu + cfg.sigma_eps * eps)
    t23 = np.full(n, np.inf)
    if np.any(ill):
        t23[ill] = _death_after(t1[ill], loc[ill], cfg.sigma_eps, r2[ill])
    return z2, t1, ill, t23


def _censor_times(cfg: SimConfig, rng, n, shared_e=None):
    e = rng.exponential(size=n) if shared_e is None else np.full(n, shared_e)
    if cfg.censor_rate == 0.0 and cfg.censor_scale is None:
        return np.full(n, np.inf)
    if cfg.censor_scale is None:
        raise ValueError("censoring scale not calibrated; call resolve() first")
    return cfg.censor_scale * e ** (1.0 / cfg.censor_shape)


def _cluster_size(cfg: SimConfig, rng, z1, nu) -> int:
    if cfg.ics == "informative":
        lam = math.exp(cfg.size_intercept + cfg.size_nu * nu + cfg.size_z1 * z1)
        return int(rng.poisson(lam)) + cfg.size_floor
    return max(int(rng.poisson(cfg.noninformative_mean)), 1)


@dataclass
class ClusterDraw:
    z1: float
    nu: float
    z2: np.ndarray
    t1: np.ndarray
    ill: np.ndarray
    t23: np.ndarray
    censor: np.ndarray
    entry: np.ndarray
    group: np.ndarray | None = None
    group_nu: np.ndarray | None = None


def draw_cluster(cfg: SimConfig, i: int, stream_key: tuple = ()) -> ClusterDraw:
    """Latent and observed quantities of cluster ``i`` from its own substream."""
    rng = _rng(cfg.seed, tuple(stream_key) + (i,))
    z1 = 1.0 if i < cfg.m / 2 else 0.0
    nu = rng.normal(0.0, cfg.sigma_nu)
    shared_e = None
    if cfg.icg is None:
        n = _cluster_size(cfg, rng, z1, nu)
        group = None
        extra = np.zeros(n)
        gnu = None
    else:
        icg = cfg.icg
        gnu_q = rng.normal(0.0, icg.sigma_group, 2)
        sizes = [int(rng.poisson(math.exp(icg.a + icg.b[q] * gnu_q[q]))) + icg.min_size for q in (0, 1)]
        n = sum(sizes)
        group = np.repeat([0, 1], sizes)
        gnu = gnu_q[group]
        extra = gnu + icg.delta_group * group
    if cfg.censor_unit == "cluster":
        shared_e = rng.exponential()
    z2, t1, ill, t23 = _subject_draws(cfg, rng, n, z1, nu, extra)
    censor = _censor_times(cfg, rng, n, shared_e)
    entry = np.zeros(n)
    if cfg.truncation_max > 0:
        entry = rng.uniform(0.0, cfg.truncation_max, n)
        for _ in range(1000):
            bad = ~((entry < t1) & (entry < censor))
            if not np.any(bad):
                break
            k = int(bad.sum())
            z2[bad], t1[bad], ill[bad], t23[bad] = _subject_draws(cfg, rng, k, z1, nu, extra[bad])
            censor[bad] = _censor_times(cfg, rng, k, shared_e)
            entry[bad] = rng.uniform(0.0, cfg.truncation_max, k)
        else:
            raise RuntimeError("left truncation rejection sampling did not terminate")
    return ClusterDraw(z1, nu, z2, t1, ill, t23, censor, entry, group, gnu)


def true_state(t, t1, ill, t23):
    """State occupied at ``t`` by uncensored trajectories (1-based)."""
    t = np.asarray(t, dtype=float)
    return np.where(t < t1, 1, np.where(ill & (t < t23), 2, 3))


def _subjects(cfg: SimConfig, d: ClusterDraw) -> list:
    out = []
    for j in range(d.t1.size):
        c = float(d.censor[j])
        t1 = float(d.t1[j])
        if d.ill[j]:
            path = [(t1, 2), (float(d.t23[j]), 3)]
        else:
            path = [(t1, 3)]
        seen = [(t, s) for t, s in path if t <= c]
        if seen and seen[-1][1] == 3:
            c = math.inf
        covs = (d.z1, float(d.z2[j]))
        group = None
        if d.group is not None:
            group = int(d.group[j])
            covs = covs + (float(group),)
        out.append(Subject(Trajectory(1, tuple(seen), c, float(d.entry[j])), covs, group))
    return out


def simulate_panel(cfg: SimConfig, stream_key: tuple = ()) -> Panel:
    """One clustered illness-death panel.

    Covariates are ``z1`` (cluster level, 1 for the first half of the
    clusters) and ``z2``; ICG panels add the group indicator ``g``.
    """
    cfg = resolve(cfg)
    clusters = [_subjects(cfg, draw_cluster(cfg, i, stream_key)) for i in range(cfg.m)]
    names = ("z1", "z2") if cfg.icg is None else ("z1", "z2", "g")
    return Panel(tuple(tuple(c) for c in clusters), StateSpace.illness_death(), names)


def simulate_icg_panel(cfg: SimConfig, stream_key: tuple = ()) -> Panel:
    """Panel with two groups per cluster; requires ``cfg.icg``."""
    if cfg.icg is None:
        raise ValueError("simulate_icg_panel needs an icg block")
    return simulate_panel(cfg, stream_key)


# ---------------------------------------------------------------------------
# censoring calibration

def _absorption_times(cfg: SimConfig, key: int, clusters: int):
    """Uncensored absorption times and Weibull base draws from a pilot run."""
    uncensored = dataclasses.replace(cfg, censor_scale=1.0, m=clusters, truncation_max=0.0)
    t_abs, base = [], []
    for i in range(clusters):
        d = draw_cluster(uncensored, i, (key,))
        t_abs.append(np.where(d.ill, d.t23, d.t1))
        base.append(d.censor)  # scale 1: these are E**(1/shape)
    return np.concatenate(t_abs), np.concatenate(base)


@lru_cache(maxsize=256)
def _calibrated_scale(cfg: SimConfig, clusters: int) -> float:
    t_abs, base = _absorption_times(cfg, PILOT_KEY, clusters)
    # uncensored iff scale * base >= t_abs, i.e. t_abs / base <= scale
    ratio = t_abs / base
    return float(np.quantile(ratio, 1.0 - cfg.censor_rate))


def calibrate_censoring(cfg: SimConfig, clusters: int = PILOT_CLUSTERS) -> float:
    """Weibull scale giving the target fraction of subjects not seen to absorb.

    Uses a pilot run of ``clusters`` clusters and takes the matching quantile
    of the ratio of absorption time to the unit-scale censoring draw, so no
    root finding is needed.
    """
    if cfg.censor_rate == 0.0:
        return math.inf
    return _calibrated_scale(dataclasses.replace(cfg, censor_scale=None, seed=0), clusters)


def resolve(cfg: SimConfig) -> SimConfig:
    """Fill in the calibrated censoring scale when it is left open."""
    if cfg.censor_scale is not None:
        return cfg
    if cfg.censor_rate == 0.0:
        return dataclasses.replace(cfg, censor_scale=math.inf)
    return dataclasses.replace(cfg, censor_scale=calibrate_censoring(cfg))


def censoring_rate(panel: Panel) -> float:
    """Fraction of subjects whose absorption is not observed."""
    return float(np.mean(panel.arrays.censored))


# ---------------------------------------------------------------------------
# pseudo-true regression coefficients

@lru_cache(maxsize=64)
def _reference(cfg: SimConfig, subjects: int) -> tuple:
    rng = _rng(cfg.seed, (REFERENCE_KEY,))
    n = subjects
    z1 = (np.arange(n) % 2).astype(float)
    nu = rng.normal(0.0, cfg.sigma_nu, n)
    z2, t1, ill, t23 = _subject_draws(cfg, rng, n, z1, nu, np.zeros(n))
    X = np.column_stack([np.ones(n), z1, z2])
    state = true_state(cfg.eval_time, t1, ill, t23)
    out = []
    for s in (1, 2, 3):
        beta, *_ = np.linalg.lstsq(X, (state == s).astype(float), rcond=None)
        out.append(tuple(float(b) for b in beta))
    return tuple(out)


def reference_beta(cfg: SimConfig, subjects: int = REFERENCE_SUBJECTS) -> dict:
    """Pseudo-true ``(beta0, beta1, beta2)`` per state for the cluster-weighted fit.

    Given the cluster effect and ``z1``, subjects in a cluster are
    independent, so each cluster's weighted estimating function has the
    expectation of a single subject.  The large-``m`` cluster-weighted GEE
    on complete-data indicators therefore converges to least squares over
    independent draws with one subject per cluster, which is what is
    computed here.  Results are cached per configuration.
    """
    key = dataclasses.replace(cfg, m=2, censor_scale=None, truncation_max=0.0, icg=None)
    ref = _reference(key, int(subjects))
    return {s + 1: np.array(ref[s]) for s in range(3)}


# ---------------------------------------------------------------------------
# studies

STRATEGIES = {
    "uw-gee": (Method.METHOD1, WeightScheme.UNWEIGHTED),
    "uw-cwgee": (Method.METHOD1, WeightScheme.INVERSE_CLUSTER_SIZE),
    "w-gee": (Method.METHOD2, WeightScheme.UNWEIGHTED),
    "w-cwgee": (Method.METHOD2, WeightScheme.INVERSE_CLUSTER_SIZE),
}

GROUP_STRATEGIES = {
    "w-gee": (Method.METHOD2, WeightScheme.UNWEIGHTED),
    "w-cwgee": (Method.METHOD2, WeightScheme.INVERSE_CLUSTER_SIZE),
    "w-group": (Method.METHOD2, WeightScheme.INVERSE_GROUP_SIZE),
}


@dataclass(frozen=True)
class Task:
    cfg: SimConfig
    replicate: int
    states: tuple
    strategies: tuple
    covariates: tuple
    target: str
    grid: tuple
    correlation: str = "independence"


@dataclass(frozen=True)
class Outcome:
    replicate: int
    state: int
    strategy: str
    estimate: float
    se: float
    p_value: float
    converged: bool
    error: str = ""


def run_replicate(task: Task) -> list[Outcome]:
    """Simulate one panel and fit every requested strategy and state."""
    groups = "icg" if task.cfg.icg is not None else None
    strategies = GROUP_STRATEGIES if groups else STRATEGIES
    panel = simulate_panel(task.cfg, (task.replicate,))
    grid = np.asarray(task.grid)
    out = []
    pseudo = {}
    for name in task.strategies:
        method, scheme = strategies[name]
        if method not in pseudo:
            try:
                pseudo[method] = jackknife(panel, grid, method)
            except (ValueError, UndefinedWeightError) as exc:
                pseudo[method] = exc
        for state in task.states:
            res = pseudo[method]
            if isinstance(res, Exception):
                out.append(Outcome(task.replicate, state, name, math.nan, math.nan, math.nan, False, str(res)))
                continue
            spec = ModelSpec(task.covariates, task.grid, task.correlation, scheme)
            pv = pseudo_set(panel, res, method, state, grid)
            try:
                fit = fit_gee(pv, panel, spec)
                k = fit.index(task.target)
                _, p = wald_test(fit, k)
                out.append(Outcome(task.replicate, state, name, float(fit.beta[k]), float(fit.se[k]), p, fit.converged))
            except ValueError as exc:
                out.append(Outcome(task.replicate, state, name, math.nan, math.nan, math.nan, False, str(exc)))
    return out


def run_tasks(tasks: list[Task], threads: int = 1) -> list[list[Outcome]]:
    """Run replicates in order; results are independent of ``threads``."""
    if threads <= 1 or len(tasks) <= 1:
        return [run_replicate(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run_replicate, tasks, chunksize=max(1, len(tasks) // (4 * threads))))


@dataclass
class StudyResult:
    """Tidy study summary plus the per-replicate outcomes behind it.

    ``rows`` carry ``delta1, state, strategy, metric, value, replicates``.
    """

    kind: str
    config: SimConfig
    replicates: int
    rows: list = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)  # delta1 -> list of Outcome

    def value(self, metric: str, state: int, strategy: str, delta1: float | None = None) -> float:
        for r in self.rows:
            if r["metric"] == metric and r["state"] == state and r["strategy"] == strategy:
                if delta1 is None or r["delta1"] == delta1:
                    return r["value"]
        raise KeyError((metric, state, strategy, delta1))

    def estimates(self, state: int, strategy: str, delta1: float) -> np.ndarray:
        return np.array([o.estimate for o in self.outcomes[delta1]
                         if o.state == state and o.strategy == strategy and not o.error])


def _ok(o: Outcome) -> bool:
    return not o.error and o.converged and math.isfinite(o.p_value)


def _study_tasks(cfg, replicates, states, strategies, covariates, target, grid, correlation):
    return [
        Task(cfg, k, tuple(states), tuple(strategies), tuple(covariates), target, tuple(grid), correlation)
        for k in range(replicates)
    ]


def power_study(
    cfg: SimConfig,
    deltas=(-1.0, -0.5, 0.0, 0.5, 1.0),
    replicates: int = 100,
    *,
    threads: int = 1,
    states=(1, 2, 3),
    strategies=tuple(STRATEGIES),
    alpha: float = 0.05,
    grid=None,
    correlation: str = "independence",
) -> StudyResult:
    """Rejection frequency of the Wald test of ``beta1 = 0`` at each ``delta1``.

    Replicate ``k`` uses the same random substreams at every ``delta1``.
    Failed or non-converged fits are excluded from the rate and counted
    under the ``failures`` metric.
    """
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    grid = (cfg.eval_time,) if grid is None else tuple(grid)
    res = StudyResult("power", cfg, replicates)
    for d1 in deltas:
        c = resolve(dataclasses.replace(cfg, delta=(float(d1), cfg.delta[1])))
        tasks = _study_tasks(c, replicates, states, strategies, ("z1", "z2"), "z1", grid, correlation)
        flat = [o for rep in run_tasks(tasks, threads) for o in rep]
        res.outcomes[float(d1)] = flat
        for s in states:
            for name in strategies:
                sel = [o for o in flat if o.state == s and o.strategy == name]
                good = [o for o in sel if _ok(o)]
                rate = float(np.mean([o.p_value < alpha for o in good])) if good else math.nan
                for metric, value in (("rejection_rate", rate), ("failures", float(len(sel) - len(good)))):
                    res.rows.append(dict(delta1=float(d1), state=s, strategy=name, metric=metric,
                                         value=value, replicates=replicates))
    return res


def bias_study(
    cfg: SimConfig,
    replicates: int = 100,
    *,
    threads: int = 1,
    states=(1, 2, 3),
    strategies=tuple(STRATEGIES),
    grid=None,
    reference_subjects: int = REFERENCE_SUBJECTS,
) -> StudyResult:
    """Absolute error of ``beta1`` against its pseudo-true value per strategy and state."""
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    grid = (cfg.eval_time,) if grid is None else tuple(grid)
    c = resolve(cfg)
    truth = reference_beta(c, reference_subjects)
    tasks = _study_tasks(c, replicates, states, strategies, ("z1", "z2"), "z1", grid, "independence")
    flat = [o for rep in run_tasks(tasks, threads) for o in rep]
    res = StudyResult("bias", c, replicates)
    d1 = c.delta[0]
    res.outcomes[d1] = flat
    for s in states:
        for name in strategies:
            sel = [o for o in flat if o.state == s and o.strategy == name]
            good = [o for o in sel if not o.error and math.isfinite(o.estimate)]
            err = np.abs(np.array([o.estimate for o in good]) - truth[s][1])
            med = float(np.median(err)) if err.size else math.nan
            mean = float(np.mean(err)) if err.size else math.nan
            for metric, value in (
                ("pseudo_true", float(truth[s][1])),
                ("median_abs_error", med),
                ("mean_abs_error", mean),
                ("failures", float(len(sel) - len(good))),
            ):
                res.rows.append(dict(delta1=d1, state=s, strategy=name, metric=metric,
                                     value=value, replicates=replicates))
    return res


def group_null_study(
    cfg: SimConfig,
    replicates: int = 100,
    *,
    threads: int = 1,
    states=(1, 2, 3),
    strategies=tuple(GROUP_STRATEGIES),
    alpha: float = 0.05,
    grid=None,
) -> StudyResult:
    """Rejection frequency of the Wald test of no group effect on ICG panels."""
    if cfg.icg is None:
        raise ValueError("group study needs an icg block")
    grid = (cfg.eval_time,) if grid is None else tuple(grid)
    c = resolve(cfg)
    tasks = _study_tasks(c, replicates, states, strategies, ("z1", "z2", "g"), "g", grid, "independence")
    flat = [o for rep in run_tasks(tasks, threads) for o in rep]
    res = StudyResult("group", c, replicates)
    d1 = c.delta[0]
    res.outcomes[d1] = flat
    for s in states:
        for name in strategies:
            sel = [o for o in flat if o.state == s and o.strategy == name]
            good = [o for o in sel if _ok(o)]
            rate = float(np.mean([o.p_value < alpha for o in good])) if good else math.nan
            for metric, value in (("rejection_rate", rate), ("failures", float(len(sel) - len(good)))):
                res.rows.append(dict(delta1=d1, state=s, strategy=name, metric=metric,
                                     value=value, replicates=replicates))
    return res


def binomial_band(p: float, n: int, level: float = 0.99) -> tuple[float, float]:
    """Central ``level`` range of a rejection rate from ``n`` replicates at true rate ``p``.

    Uses exact binomial quantiles of the rejection count.
    """
    tail = (1.0 - level) / 2.0
    lo = stats.binom.ppf(tail, n, p)
    hi = stats.binom.isf(tail, n, p)
    return float(lo / n), float(hi / n)


__all__ = [
    "GROUP_STRATEGIES",
    "IcgConfig",
    "STRATEGIES",
    "SimConfig",
    "StudyResult",
    "bias_study",
    "binomial_band",
    "calibrate_censoring",
    "censoring_rate",
    "draw_cluster",
    "group_null_study",
    "power_study",
    "reference_beta",
    "resolve",
    "simulate_icg_panel",
    "simulate_panel",
    "true_state",
]
