"""Posterior and predictive diagnostics: recovery metrics, chain efficiency,
upper-tail quantile errors, QQ tables, and return levels.

Every function here is pure; randomness only enters through explicitly
passed generators for the simulation-backed metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

__all__ = [
    "absolute_bias",
    "posterior_se",
    "credible_interval",
    "autocorrelations",
    "ess",
    "r_squared",
    "hill_estimator",
    "mqae",
    "mqse",
    "qq_data",
    "return_period_probability",
    "return_levels",
    "MetricReport",
    "ReturnLevelTable",
]

_QUANTILE_METHOD = "linear"  # project-wide convention, same as thresholds


def absolute_bias(draws, truth: float) -> float:
    draws = np.asarray(draws, dtype=float)
    if draws.size < 1:
        raise ValueError("need at least one draw")
    return abs(float(draws.mean()) - truth)


def posterior_se(draws) -> float:
    draws = np.asarray(draws, dtype=float)
    if draws.size < 2:
        raise ValueError("need at least two draws")
    return float(draws.std(ddof=1))


def credible_interval(draws, lo: float = 0.025, hi: float = 0.975):
    draws = np.asarray(draws, dtype=float)
    if draws.size < 2:
        raise ValueError("need at least two draws")
    lower, upper = np.quantile(draws, [lo, hi], method=_QUANTILE_METHOD)
    return float(lower), float(upper)


def autocorrelations(x, max_lag: int) -> np.ndarray:
    """Sample autocorrelations rho_1 .. rho_max_lag (biased, FFT-free)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    centered = x - x.mean()
    denom = float(centered @ centered)
    if denom == 0.0:
        return np.zeros(max_lag)
    return np.array(
        [float(centered[k:] @ centered[:-k]) / denom for k in range(1, max_lag + 1)]
    )


def ess(draws, wall_minutes: float | None = None):
    """Effective sample size N / (1 + 2 sum rho_k).

    The sum stops at the first lag whose autocorrelation drops to 0.05 or
    below, capped at N/3.  A zero-variance chain counts as fully efficient.
    Returns (ess, ess_per_min); the rate is None without a runtime.
    """
    draws = np.asarray(draws, dtype=float)
    n = draws.size
    if n < 10:
        raise ValueError("need at least ten draws for an ESS estimate")
    cap = n // 3
    if draws.max() == draws.min():
        rho = np.zeros(cap)  # zero-variance chain: autocorrelations defined as 0
    else:
        rho = autocorrelations(draws, cap)
    below = np.nonzero(rho <= 0.05)[0]
    k = int(below[0]) + 1 if below.size else cap
    value = n / (1.0 + 2.0 * float(rho[:k].sum()))
    rate = None
    if wall_minutes is not None:
        if wall_minutes <= 0:
            raise ValueError("wall time must be positive")
        rate = value / wall_minutes
    return value, rate


def r_squared(post_means, truths) -> float:
    post_means = np.asarray(post_means, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if truths.size < 2:
        raise ValueError("need at least two recovery settings")
    sst = float(((truths - truths.mean()) ** 2).sum())
    if sst == 0.0:
        raise ValueError("ground-truth values are constant")
    sse = float(((post_means - truths) ** 2).sum())
    return 1.0 - sse / sst


def hill_estimator(sample, tail_fraction: float = 0.01) -> float:
    """Hill tail-index estimate from the top ``tail_fraction`` of the sample.

    Uses the k largest order statistics relative to the (k+1)-th.
    """
    sample = np.asarray(sample, dtype=float)
    k = int(sample.size * tail_fraction)
    if k < 2 or k >= sample.size:
        raise ValueError("tail fraction leaves too few (or too many) order statistics")
    top = np.sort(sample)[-(k + 1):]
    if top[0] <= 0:
        raise ValueError("tail values must be positive")
    return 1.0 / float(np.mean(np.log(top[1:] / top[0])))


def _site_quantiles(panel: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """(levels, sites) matrix of per-site quantiles over the time axis."""
    return np.quantile(panel, levels, axis=0, method=_QUANTILE_METHOD)


def _quantile_errors(observed, draws, simulator, c_u, sims_per_draw, rng, squared):
    observed = np.asarray(observed, dtype=float)
    if not 0 <= c_u < 99:
        raise ValueError("lower quantile index must lie in [0, 99)")
    levels = np.arange(c_u, 100) / 100.0
    obs_q = _site_quantiles(observed, levels)
    n = observed.shape[0]
    total = 0.0
    count = 0
    for theta in draws:
        sim_rng = rng.spawn(1)[0]
        panels = [simulator(theta, n, r) for r in sim_rng.spawn(sims_per_draw)]
        sim_q = _site_quantiles(np.vstack(panels), levels)
        diff = obs_q - sim_q
        total += float((diff**2).sum() if squared else np.abs(diff).sum())
        count += diff.size
    return total / count


def mqae(observed, draws, simulator, c_u: int = 75, sims_per_draw: int = 1, rng=None):
    """Mean absolute error between observed and simulated upper-tail
    quantiles, averaged over posterior draws, integer percent levels
    c_u..99, and sites.

    ``simulator(theta, n, rng)`` must return an n x d panel comparable to
    ``observed`` (same censoring convention).  Quantiles are taken per site
    over the time dimension.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    return _quantile_errors(observed, draws, simulator, c_u, sims_per_draw, rng, False)


def mqse(observed, draws, simulator, c_u: int = 75, sims_per_draw: int = 1, rng=None):
    """As mqae with squared differences."""
    if rng is None:
        rng = np.random.default_rng(0)
    return _quantile_errors(observed, draws, simulator, c_u, sims_per_draw, rng, True)


def qq_data(
    observed_column,
    theta_mean,
    simulator,
    probs,
    band_reps: int = 200,
    rng=None,
):
    """Observed-versus-fitted quantile table for a single site.

    The fitted curve is the median over ``band_reps`` panels simulated at the
    posterior-mean hyperparameters; the band spans their 2.5/97.5% quantiles.
    Returns a list of (prob, observed, fitted, band_lo, band_hi) rows.
    """
    observed_column = np.asarray(observed_column, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if probs.size == 0:
        return []
    if rng is None:
        rng = np.random.default_rng(0)
    n = observed_column.shape[0]
    obs_q = np.quantile(observed_column, probs, method=_QUANTILE_METHOD)
    sim_q = np.empty((band_reps, probs.size))
    for r, rep_rng in enumerate(rng.spawn(band_reps)):
        panel = simulator(theta_mean, n, rep_rng)
        sim_q[r] = np.quantile(panel, probs, method=_QUANTILE_METHOD)
    fitted = np.quantile(sim_q, 0.5, axis=0, method=_QUANTILE_METHOD)
    lo = np.quantile(sim_q, 0.025, axis=0, method=_QUANTILE_METHOD)
    hi = np.quantile(sim_q, 0.975, axis=0, method=_QUANTILE_METHOD)
    return [
        (float(p), float(o), float(f), float(a), float(b))
        for p, o, f, a, b in zip(probs, obs_q, fitted, lo, hi)
    ]


def return_period_probability(period_years: float, season_days: int = 122) -> float:
    """Marginal quantile level of the T-year event within the modeled season."""
    if period_years < 1:
        raise ValueError("return periods below one year are not defined here")
    return 1.0 - 1.0 / (period_years * season_days)


@dataclass(frozen=True)
class ReturnLevelTable:
    site_id: tuple
    periods: tuple
    median: np.ndarray  # (periods, sites)
    lower: np.ndarray
    upper: np.ndarray

    def rows(self):
        for j, sid in enumerate(self.site_id):
            for i, period in enumerate(self.periods):
                yield (
                    sid,
                    period,
                    float(self.median[i, j]),
                    float(self.lower[i, j]),
                    float(self.upper[i, j]),
                )


def return_levels(
    draws,
    simulator,
    sites,
    periods,
    season_days: int = 122,
    rows_per_draw: int | None = None,
    rng=None,
) -> ReturnLevelTable:
    """Posterior return levels from long simulated panels.

    For each posterior draw one long panel is simulated and the T-year level
    at a site is its empirical quantile at 1 - 1/(T * season_days).  The
    table reports the posterior median and 2.5/97.5% bands.  A draw's panel
    needs at least 50 / (1 - p) rows for the most extreme period requested.
    """
    periods = sorted(float(p) for p in periods)
    if not periods:
        raise ValueError("need at least one return period")
    probs = np.array([return_period_probability(p, season_days) for p in periods])
    required = int(np.ceil(50.0 / (1.0 - probs.max())))
    if rows_per_draw is None:
        rows_per_draw = required
    if rows_per_draw < required:
        raise ConfigError(
            f"return-level budget too small: {rows_per_draw} rows per draw, "
            f"need >= {required} for a {periods[-1]:g}-year level"
        )
    if rng is None:
        rng = np.random.default_rng(0)
    draws = list(draws)
    levels = np.empty((len(draws), len(periods), sites.n_sites))
    for i, (theta, draw_rng) in enumerate(zip(draws, rng.spawn(len(draws)))):
        panel = simulator(theta, rows_per_draw, draw_rng)
        levels[i] = _site_quantiles(panel, probs)
    median = np.quantile(levels, 0.5, axis=0, method=_QUANTILE_METHOD)
    lower = np.quantile(levels, 0.025, axis=0, method=_QUANTILE_METHOD)
    upper = np.quantile(levels, 0.975, axis=0, method=_QUANTILE_METHOD)
    return ReturnLevelTable(tuple(sites.site_id), tuple(periods), median, lower, upper)


@dataclass
class MetricReport:
    """Per-parameter recovery/efficiency metrics plus dataset-level quantile
    errors.  Timing-derived rates live in a separate block so the main body
    stays byte-reproducible."""

    params: dict = field(default_factory=dict)  # name -> {ab?, se, ci, ci_width, ess, r2?}
    dataset: dict = field(default_factory=dict)  # {mqae?, mqse?, c_u?}
    timing: dict = field(default_factory=dict)  # {wall_minutes?, ess_per_min: {name: rate}}

    @classmethod
    def from_chain(cls, names, draws, truth: dict | None = None, wall_minutes=None):
        """Summarize an (n_draws, n_params) array of posterior draws."""
        draws = np.asarray(draws, dtype=float)
        report = cls()
        rates = {}
        for j, name in enumerate(names):
            column = draws[:, j]
            lo, hi = credible_interval(column)
            chain_ess, rate = ess(column, wall_minutes)
            entry = {
                "mean": float(column.mean()),
                "se": posterior_se(column),
                "ci_lower": lo,
                "ci_upper": hi,
                "ci_width": hi - lo,
                "ess": min(chain_ess, float(column.size)),
            }
            if truth is not None and name in truth:
                entry["truth"] = float(truth[name])
                entry["ab"] = absolute_bias(column, truth[name])
            report.params[name] = entry
            if rate is not None:
                rates[name] = rate
        if wall_minutes is not None:
            report.timing = {"wall_minutes": float(wall_minutes), "ess_per_min": rates}
        return report

    def body_dict(self) -> dict:
        return {"params": self.params, "dataset": self.dataset}

    def to_json(self) -> str:
        return json.dumps(self.body_dict(), indent=2, sort_keys=True)

    def timing_json(self) -> str:
        return json.dumps(self.timing, indent=2, sort_keys=True)
