"""Generalized estimating equations for pseudo-value responses.

The mean model is linear (identity link) and every subject contributes a
response vector over the grid times.  The working covariance is a scalar
dispersion times an AR(1) or independence correlation matrix, so the
dispersion cancels from both the solve and the sandwich.  Subject weights
select the equations: all ones gives the ordinary GEE, ``1/n_i`` the
cluster-weighted GEE and ``1/(G_i n_iq)`` the group-weighted version.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .panel import Panel, WeightScheme, subject_weights
from .pseudovalues import PseudoValueSet

TOL = 1e-8
MAX_ITER = 50
RHO_BOUND = 1.0 - 1e-6


class Correlation(enum.Enum):
    INDEPENDENCE = "independence"
    AR1 = "ar1"

    @classmethod
    def parse(cls, value) -> "Correlation":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        if v in ("ind", "independence", "indep"):
            return cls.INDEPENDENCE
        if v in ("ar1", "ar(1)"):
            return cls.AR1
        raise ValueError(f"unknown working correlation {value!r}")


@dataclass(frozen=True)
class ModelSpec:
    """What to regress and how.

    Parameters
    ----------
    covariates : tuple of str
        Panel covariate columns entering the mean model.
    grid : array_like
        Times at which the pseudo-values were computed.
    correlation : Correlation or str
        Working correlation over the grid times.
    weight_scheme : WeightScheme or str
        Subject weights in the estimating equations.
    time_intercepts : bool
        Separate intercept per grid time when the grid has several points.
    """

    covariates: tuple
    grid: tuple
    correlation: Correlation = Correlation.INDEPENDENCE
    weight_scheme: WeightScheme = WeightScheme.UNWEIGHTED
    time_intercepts: bool = True
    link: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "grid", tuple(float(t) for t in np.atleast_1d(self.grid)))
        object.__setattr__(self, "correlation", Correlation.parse(self.correlation))
        object.__setattr__(self, "weight_scheme", WeightScheme.parse(self.weight_scheme))
        if self.link != "identity":
            raise ValueError(f"unsupported link {self.link!r}")
        if self.correlation is Correlation.AR1 and len(self.grid) < 2:
            raise ValueError("ar1 working correlation needs at least two grid times")

    @property
    def coefficient_names(self) -> tuple:
        r = len(self.grid)
        if self.time_intercepts and r > 1:
            icpt = tuple(f"(Intercept)@{t!r}" for t in self.grid)
        else:
            icpt = ("(Intercept)",)
        return icpt + self.covariates


@dataclass(frozen=True)
class GeeFit:
    beta: np.ndarray
    sandwich_cov: np.ndarray
    rho: float | None
    iterations: int
    converged: bool
    names: tuple = ()
    rho_clamped: bool = False
    weight_scheme: WeightScheme = WeightScheme.UNWEIGHTED
    correlation: Correlation = Correlation.INDEPENDENCE
    num_clusters: int = 0
    num_subjects: int = 0
    history: tuple = field(default=(), repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sandwich_cov), 0.0, None))

    def index(self, name: str) -> int:
        return self.names.index(name)


# ---------------------------------------------------------------------------
# design and working correlation

def design_matrix(panel: Panel, spec: ModelSpec) -> np.ndarray:
    """Array of shape ``(n, r, p)``: one covariate row per subject and grid time."""
    arr = panel.arrays
    missing = [c for c in spec.covariates if c not in panel.covariate_names]
    if missing:
        raise ValueError(f"covariates not in panel: {missing}")
    cols = [panel.covariate_names.index(c) for c in spec.covariates]
    Z = arr.covariates[:, cols]
    n, r = Z.shape[0], len(spec.grid)
    if spec.time_intercepts and r > 1:
        icpt = np.broadcast_to(np.eye(r), (n, r, r))
    else:
        icpt = np.ones((n, r, 1))
    return np.concatenate([icpt, np.broadcast_to(Z[:, None, :], (n, r, Z.shape[1]))], axis=2)


def ar1_matrix(rho: float, r: int) -> np.ndarray:
    idx = np.arange(r)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def ar1_inverse(rho: float, r: int) -> np.ndarray:
    """Closed-form tridiagonal inverse of the AR(1) correlation matrix."""
    if r == 1:
        return np.ones((1, 1))
    inv = np.diag(np.r_[1.0, np.full(r - 2, 1.0 + rho * rho), 1.0])
    off = np.arange(r - 1)
    inv[off, off + 1] = -rho
    inv[off + 1, off] = -rho
    return inv / (1.0 - rho * rho)


def estimate_ar1_qls(residuals: np.ndarray, weights: np.ndarray | None = None) -> tuple[float, bool]:
    """Two-stage quasi-least squares estimate of the AR(1) parameter.

    Parameters
    ----------
    residuals : ndarray, shape (n, r)
        Residuals of every subject over the grid, ``r >= 2``.
    weights : ndarray, shape (n,), optional
        Subject weights of the estimating equations.

    Returns
    -------
    rho : float
        Stage-two estimate, clamped to ``(-1 + 1e-6, 1 - 1e-6)``.
    clamped : bool
        Whether the clamp was applied.

    Notes
    -----
    With ``a`` the sum of squares, ``b`` the sum of interior squares and
    ``c`` the sum of lag-one products, stage one minimises the quadratic
    form of the inverse AR(1) matrix and solves
    ``c a0**2 - (a + b) a0 + c = 0``; stage two maps ``a0`` to
    ``2 a0 / (1 + a0**2)``.
    """
    e = np.asarray(residuals, dtype=float)
    if e.ndim != 2 or e.shape[1] < 2:
        raise ValueError("ar1 estimation needs residuals over at least two times")
    w = np.ones(e.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    a = float(w @ (e * e).sum(axis=1))
    b = float(w @ (e[:, 1:-1] ** 2).sum(axis=1))
    c = float(w @ (e[:, :-1] * e[:, 1:]).sum(axis=1))
    if a <= 0.0 or c == 0.0:
        return 0.0, False
    s = a + b
    disc = max(s * s - 4.0 * c * c, 0.0)
    a0 = (s - np.sqrt(disc)) / (2.0 * c)
    rho = 2.0 * a0 / (1.0 + a0 * a0)
    if abs(rho) > RHO_BOUND:
        return float(np.copysign(RHO_BOUND, rho)), True
    return float(rho), False


# ---------------------------------------------------------------------------
# solver

def _information(X, w, Rinv):
    return np.einsum("i,itp,ts,isq->pq", w, X, Rinv, X, optimize=True)


def _solve(X, Y, w, Rinv):
    A = _information(X, w, Rinv)
    b = np.einsum("i,itp,ts,is->p", w, X, Rinv, Y, optimize=True)
    return np.linalg.solve(A, b)


def sandwich_variance(X, Y, beta, w, cluster, Rinv) -> np.ndarray:
    """Cluster-robust covariance ``B^{-1} M B^{-1}``.

    ``B`` is the weighted information and ``M`` sums estimating-function
    contributions within a cluster before taking outer products across
    clusters.
    """
    A = _information(X, w, Rinv)
    try:
        bread = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        raise ValueError("non-invertible information") from None
    if not np.all(np.isfinite(bread)) or np.linalg.cond(A) > 1e14:
        raise ValueError("non-invertible information")
    e = Y - np.einsum("itp,p->it", X, beta)
    u = np.einsum("i,itp,ts,is->ip", w, X, Rinv, e, optimize=True)
    _, inv = np.unique(cluster, return_inverse=True)
    U = np.zeros((inv.max() + 1, u.shape[1]))
    np.add.at(U, inv, u)
    meat = U.T @ U
    cov = bread @ meat @ bread
    return 0.5 * (cov + cov.T)


def gee(X, Y, w, cluster, correlation=Correlation.INDEPENDENCE, *, tol=TOL, max_iter=MAX_ITER):
    """Fit the linear GEE on raw arrays.

    Parameters
    ----------
    X : ndarray, shape (n, r, p)
    Y : ndarray, shape (n, r)
    w : ndarray, shape (n,)
    cluster : ndarray, shape (n,)
        Cluster label of every subject; clusters are the independent units.

    Returns
    -------
    beta, cov, rho, iterations, converged, rho_clamped, history
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    w = np.asarray(w, dtype=float)
    correlation = Correlation.parse(correlation)
    n, r, p = X.shape
    if np.linalg.matrix_rank(X.reshape(n * r, p)) < p:
        raise ValueError("rank-deficient design")
    if correlation is Correlation.INDEPENDENCE:
        Rinv = np.eye(r)
        beta = _solve(X, Y, w, Rinv)
        return beta, sandwich_variance(X, Y, beta, w, cluster, Rinv), None, 1, True, False, ()
    rho, clamped = 0.0, False
    beta = None
    history = []
    converged = False
    it = 0
    while it < max_iter:
        it += 1
        Rinv = ar1_inverse(rho, r)
        new = _solve(X, Y, w, Rinv)
        step = np.inf if beta is None else float(np.max(np.abs(new - beta)))
        beta = new
        history.append((rho, step))
        if step < tol:
            converged = True
            break
        rho, clamped = estimate_ar1_qls(Y - np.einsum("itp,p->it", X, beta), w)
    Rinv = ar1_inverse(rho, r)
    cov = sandwich_variance(X, Y, beta, w, cluster, Rinv)
    return beta, cov, rho, it, converged, clamped, tuple(history)


def fit_gee(pv: PseudoValueSet, panel: Panel, spec: ModelSpec) -> GeeFit:
    """Regress pseudo-values on covariates with the weighted estimating equations."""
    if pv.grid.size != len(spec.grid) or not np.allclose(pv.grid, spec.grid, rtol=0, atol=0):
        raise ValueError("pseudo-value grid differs from the model grid")
    if pv.values.shape[0] != panel.num_subjects:
        raise ValueError("pseudo-values do not match the panel")
    X = design_matrix(panel, spec)
    w = subject_weights(panel, spec.weight_scheme)
    beta, cov, rho, it, conv, clamped, hist = gee(
        X, pv.values, w, panel.arrays.cluster, spec.correlation
    )
    return GeeFit(
        beta=beta,
        sandwich_cov=cov,
        rho=rho,
        iterations=it,
        converged=conv,
        names=spec.coefficient_names,
        rho_clamped=clamped,
        weight_scheme=spec.weight_scheme,
        correlation=spec.correlation,
        num_clusters=panel.num_clusters,
        num_subjects=panel.num_subjects,
        history=hist,
    )


def wald_test(fit: GeeFit, k: int | str) -> tuple[float, float]:
    """Two-sided Wald test of ``beta_k = 0`` with the sandwich variance."""
    if isinstance(k, str):
        k = fit.index(k)
    var = float(fit.sandwich_cov[k, k])
    if not var > 0.0:
        raise ValueError("zero variance: Wald p-value undefined")
    z = float(fit.beta[k]) / np.sqrt(var)
    return z, float(2.0 * stats.norm.sf(abs(z)))


def coefficient_table(fit: GeeFit) -> list[dict]:
    """Rows of ``term, Estimate, SE, p-value`` in coefficient order."""
    rows = []
    for k, name in enumerate(fit.names):
        se = float(fit.se[k])
        p = wald_test(fit, k)[1] if se > 0 else float("nan")
        rows.append({"term": name, "Estimate": float(fit.beta[k]), "SE": se, "p-value": p})
    return rows


__all__ = [
    "Correlation",
    "GeeFit",
    "ModelSpec",
    "ar1_inverse",
    "ar1_matrix",
    "coefficient_table",
    "design_matrix",
    "estimate_ar1_qls",
    "fit_gee",
    "gee",
    "sandwich_variance",
    "wald_test",
]
