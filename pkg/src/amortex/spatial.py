"""Spatial primitives: site geometry, exponential correlation, Gaussian-copula
sampling, and unit-mean inverse-gamma marginals.

The spatially dependent factor is built in three steps: correlated Gaussians
from a Cholesky factor, uniforms through the normal cdf, and heavy-tailed
positive values through the inverse-gamma quantile.  The marginal is pinned to
mean one by fixing the scale to shape - 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .errors import DecompositionError

__all__ = [
    "SiteSet",
    "CorrelationModel",
    "IgMargin",
    "correlation_matrix",
    "cholesky",
    "sample_x3",
    "ig_cdf",
    "ig_quantile",
    "norm_cdf",
    "norm_quantile",
    "grid_sites",
]


@dataclass(frozen=True)
class SiteSet:
    """Fixed set of observation sites with covariates and pairwise distances.

    Attributes
    ----------
    site_id : tuple of str
        Stable identifiers, length d.
    coords : ndarray, shape (d, 2)
        Planar coordinates (lon/lat pairs are treated as planar degrees; the
        unit is recorded by the caller, never converted here).
    covariates : ndarray, shape (d, p)
        Covariate columns used by the log-linear scale.
    dist : ndarray, shape (d, d)
        Symmetric nonnegative distance matrix, zero diagonal.
    delta : float
        Maximum pairwise distance.
    """

    site_id: tuple
    coords: np.ndarray
    covariates: np.ndarray
    dist: np.ndarray
    delta: float = field(default=0.0)

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        cov = np.asarray(self.covariates, dtype=float)
        dist = np.asarray(self.dist, dtype=float)
        if coords.ndim != 2 or coords.shape[0] < 1:
            raise ValueError("coords must be a (d, 2) array with d >= 1")
        d = coords.shape[0]
        if len(self.site_id) != d:
            raise ValueError("site_id length must match coords")
        if cov.shape[0] != d:
            raise ValueError("covariates must have one row per site")
        if not np.all(np.isfinite(cov)):
            raise ValueError("covariates must be finite")
        if dist.shape != (d, d) or not np.allclose(dist, dist.T) or np.any(dist < 0):
            raise ValueError("dist must be a symmetric nonnegative (d, d) matrix")
        if np.any(np.diag(dist) != 0.0):
            raise ValueError("dist must have a zero diagonal")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "dist", dist)
        object.__setattr__(self, "delta", float(dist.max()))

    @property
    def n_sites(self) -> int:
        return self.coords.shape[0]

    @classmethod
    def from_coords(cls, site_id, coords, covariates) -> "SiteSet":
        """Build a SiteSet computing Euclidean distances from coordinates."""
        coords = np.asarray(coords, dtype=float)
        diff = coords[:, None, :] - coords[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        return cls(tuple(site_id), coords, np.asarray(covariates, dtype=float), dist)


def grid_sites(d1: int, d2: int, extra_covariates: int = 0, rng=None) -> SiteSet:
    """Regular d1 x d2 grid on the unit square.

    Covariates are the raw grid coordinates plus ``extra_covariates``
    independent N(0, 1) columns (the simulation-study layout).
    """
    if d1 < 1 or d2 < 1:
        raise ValueError("grid dimensions must be positive")
    xs = np.linspace(0.0, 1.0, d1) if d1 > 1 else np.array([0.0])
    ys = np.linspace(0.0, 1.0, d2) if d2 > 1 else np.array([0.0])
    coords = np.array([(x, y) for x in xs for y in ys])
    cov = [coords[:, 0], coords[:, 1]]
    if extra_covariates:
        if rng is None:
            raise ValueError("rng required when extra_covariates > 0")
        for _ in range(extra_covariates):
            cov.append(rng.standard_normal(coords.shape[0]))
    ids = [f"s{i:03d}" for i in range(coords.shape[0])]
    return SiteSet.from_coords(ids, coords, np.column_stack(cov))


@dataclass(frozen=True)
class CorrelationModel:
    """Isotropic exponential correlation exp(-h / corr_range)."""

    corr_range: float

    def __post_init__(self):
        if not (np.isfinite(self.corr_range) and self.corr_range > 0):
            raise ValueError("correlation range must be a positive finite scalar")


@dataclass(frozen=True)
class IgMargin:
    """Inverse-gamma marginal with unit mean: scale fixed to shape - 1.

    Variance is 1 / (shape - 2) for shape > 2; the survival function decays
    like x ** -shape, so smaller shapes give heavier tails.
    """

    shape: float
    scale: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if not (np.isfinite(self.shape) and self.shape > 1):
            raise ValueError("inverse-gamma shape must exceed 1")
        expected = self.shape - 1.0
        if self.scale is None:
            object.__setattr__(self, "scale", expected)
        elif abs(self.scale - expected) > 1e-12 * max(1.0, expected):
            raise ValueError("scale must equal shape - 1 (unit-mean margin)")

    @property
    def variance(self) -> float:
        if self.shape <= 2:
            return np.inf
        return 1.0 / (self.shape - 2.0)


def correlation_matrix(sites: SiteSet, model: CorrelationModel) -> np.ndarray:
    """exp(-dist / range) correlation matrix, unit diagonal."""
    if not np.all(np.isfinite(sites.dist)):
        raise ValueError("distance matrix has non-finite entries")
    return np.exp(-sites.dist / model.corr_range)


def cholesky(corr: np.ndarray) -> np.ndarray:
    """Lower-triangular factor L with L @ L.T = corr.

    Near-singular matrices (large ranges on dense grids) get a jittered
    diagonal: 1e-10 * I escalated tenfold, at most three retries.
    """
    corr = np.asarray(corr, dtype=float)
    jitter = 0.0
    for attempt in range(4):
        try:
            return np.linalg.cholesky(corr + jitter * np.eye(corr.shape[0]))
        except np.linalg.LinAlgError:
            jitter = 1e-10 * 10**attempt
    raise DecompositionError(
        f"matrix of order {corr.shape[0]} not positive definite after jitter retries"
    )


def norm_cdf(z):
    """Standard normal cdf (complementary-error-function based)."""
    return special.ndtr(z)


def norm_quantile(u):
    """Standard normal quantile."""
    return special.ndtri(u)


def ig_cdf(x, margin: IgMargin):
    """Inverse-gamma cdf: regularized upper incomplete gamma at scale / x."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = special.gammaincc(margin.shape, margin.scale / x[pos])
    return out if out.ndim else float(out)


def _ig_log_pdf(x, margin: IgMargin):
    a, b = margin.shape, margin.scale
    return a * np.log(b) - special.gammaln(a) - (a + 1.0) * np.log(x) - b / x


def ig_quantile(u, margin: IgMargin):
    """Inverse-gamma quantile by bracketing plus safeguarded Newton.

    Solves cdf(x) = u to 1e-10 in the cdf value.  The cdf is monotone, so a
    doubling/halving bracket around the unit mean is always valid; Newton
    steps falling outside the bracket are replaced by bisection.
    """
    u_arr = np.atleast_1d(np.asarray(u, dtype=float))
    if np.any(~np.isfinite(u_arr)) or np.any(u_arr <= 0.0) or np.any(u_arr >= 1.0):
        raise ValueError("quantile levels must lie strictly inside (0, 1)")

    lo = np.full(u_arr.shape, 1e-8)
    hi = np.full(u_arr.shape, 4.0)
    # expand the bracket until it encloses every requested level
    for _ in range(200):
        bad = ig_cdf(hi, margin) < u_arr
        if not np.any(bad):
            break
        hi[bad] *= 2.0
    for _ in range(200):
        bad = ig_cdf(lo, margin) > u_arr
        if not np.any(bad):
            break
        lo[bad] *= 0.5

    x = np.sqrt(lo * hi)
    resid = ig_cdf(x, margin) - u_arr
    for _ in range(200):
        if np.all(np.abs(resid) <= 1e-10):
            break
        above = resid > 0
        hi = np.where(above, x, hi)
        lo = np.where(above, lo, x)
        # Newton step where the density is representable, bisection elsewhere
        log_pdf = _ig_log_pdf(x, margin)
        with np.errstate(over="ignore"):
            candidate = np.where(log_pdf > -700.0, x - resid * np.exp(-log_pdf), np.nan)
        outside = ~np.isfinite(candidate) | (candidate <= lo) | (candidate >= hi)
        x = np.where(outside, 0.5 * (lo + hi), candidate)
        resid = ig_cdf(x, margin) - u_arr
    return x if np.ndim(u) else float(x[0])


def sample_x3(
    sites: SiteSet,
    model: CorrelationModel,
    margin: IgMargin,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """n replicates of the Gaussian-copula field with inverse-gamma margins.

    Each row: Z ~ N(0, corr), U = Phi(Z) componentwise, X = F3^{-1}(U).
    Rank structure depends only on the copula, so identical seeds with
    different margins give identical ranks.
    """
    corr = correlation_matrix(sites, model)
    factor = cholesky(corr)
    z = rng.standard_normal((n, sites.n_sites)) @ factor.T
    u = norm_cdf(z)
    return ig_quantile(u, margin)
