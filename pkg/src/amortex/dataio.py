"""Site and observation file ingestion plus the experiment configuration.

Sites arrive as a CSV of ids, coordinates, and covariates; observations as a
wide CSV of daily values, one column per site.  Covariates are standardized
over the loaded sites; the distance matrix is Euclidean on the raw
coordinates, whose unit is recorded but never converted.  Configurations are
strict JSON: unknown keys anywhere are errors, and parse(emit(cfg)) == cfg.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError
from .model import COVARIATE_MODELS, VARIANTS
from .spatial import SiteSet

__all__ = ["load_sites", "load_observations", "ExperimentConfig", "month_window_days"]

_MONTH_DAYS = {1: 31, 2: 28, 3: 31, 4: 30, 5: 31, 6: 30, 7: 31, 8: 31, 9: 30,
               10: 31, 11: 30, 12: 31}


def load_sites(path) -> SiteSet:
    """Read a site table: site_id, lon, lat, alt, plus optional extra
    covariate columns.  Covariates are standardized to zero mean and unit
    sample standard deviation over the loaded sites."""
    path = Path(path)
    try:
        table = pd.read_csv(path, dtype={"site_id": str})
    except Exception as exc:
        raise DataError(f"{path}: cannot parse site table ({exc})") from exc
    required = ["site_id", "lon", "lat", "alt"]
    missing = [c for c in required if c not in table.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    if table["site_id"].duplicated().any():
        dupes = table.loc[table["site_id"].duplicated(), "site_id"].tolist()
        raise DataError(f"{path}: duplicate site ids {dupes}")
    covariate_cols = ["lon", "lat", "alt"] + [
        c for c in table.columns if c not in ("site_id", "lon", "lat", "alt")
    ]
    raw = table[covariate_cols].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    if not np.all(np.isfinite(raw)):
        bad = np.argwhere(~np.isfinite(raw))
        cells = [(table["site_id"].iloc[i], covariate_cols[j]) for i, j in bad[:10]]
        raise DataError(f"{path}: non-numeric or missing covariate cells {cells}")
    sd = raw.std(axis=0, ddof=1) if raw.shape[0] > 1 else np.ones(raw.shape[1])
    if np.any(sd == 0):
        constant = [covariate_cols[j] for j in np.nonzero(sd == 0)[0]]
        raise DataError(f"{path}: covariates {constant} are constant, cannot standardize")
    standardized = (raw - raw.mean(axis=0)) / sd
    coords = table[["lon", "lat"]].to_numpy(dtype=float)
    return SiteSet.from_coords(tuple(table["site_id"]), coords, standardized)


def load_observations(path, sites: SiteSet, months=(9, 10, 11, 12)):
    """Read the observation panel restricted to the configured months.

    Returns (values, dates): an n x d float matrix in site order and the kept
    dates.  Missing cells inside the window are an error (the model has no
    missing-data mechanism).
    """
    path = Path(path)
    try:
        table = pd.read_csv(path)
    except Exception as exc:
        raise DataError(f"{path}: cannot parse observations ({exc})") from exc
    if table.columns[0] != "date":
        raise DataError(f"{path}: first column must be 'date'")
    file_sites = list(table.columns[1:])
    if set(file_sites) != set(sites.site_id):
        extra = sorted(set(file_sites) - set(sites.site_id))
        absent = sorted(set(sites.site_id) - set(file_sites))
        raise DataError(
            f"{path}: site columns do not match the site table "
            f"(unexpected {extra[:5]}, missing {absent[:5]})"
        )
    try:
        dates = pd.to_datetime(table["date"], format="ISO8601")
    except Exception as exc:
        raise DataError(f"{path}: unparseable dates ({exc})") from exc
    if not dates.is_monotonic_increasing or dates.duplicated().any():
        raise DataError(f"{path}: dates must be strictly increasing")
    keep = dates.dt.month.isin(list(months))
    if not keep.any():
        raise DataError(f"{path}: no rows fall in months {sorted(months)}")
    frame = table.loc[keep, list(sites.site_id)]
    values = frame.to_numpy(dtype=float)
    if np.isnan(values).any():
        rows, cols = np.nonzero(np.isnan(values))
        kept_dates = dates[keep].dt.date.to_numpy()
        cells = [
            f"{kept_dates[r]}:{sites.site_id[c]}" for r, c in zip(rows[:20], cols[:20])
        ]
        raise DataError(f"{path}: missing values in the modeled window at {cells}")
    return values, list(dates[keep].dt.date)


def month_window_days(months) -> int:
    """Days per year covered by the month filter (non-leap convention)."""
    months = list(months)
    if not months or any(m not in _MONTH_DAYS for m in months):
        raise ConfigError(f"invalid month filter {months}")
    if len(set(months)) != len(months):
        raise ConfigError("month filter has duplicates")
    return sum(_MONTH_DAYS[m] for m in months)


_GIBBS_DEFAULTS = {"n_iter": 1000, "burn_in": None, "chains": 2}
_METRIC_DEFAULTS = {
    "c_u": 75,
    "posterior_draws": 50,
    "sims_per_draw": 1,
    "return_periods": [2, 5, 10, 25],
    "qq_probs": [0.05, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99],
    "qq_band_reps": 200,
    "qq_sites": 4,
}


@dataclass
class ExperimentConfig:
    """Everything one experiment run needs, mirroring the config file keys."""

    variant: str
    covmodel: str
    seed: int
    output_dir: str
    censor_level: float = 0.75
    months: tuple = (9, 10, 11, 12)
    season_days: int = 122
    sites_file: str | None = None
    observations_file: str | None = None
    synthetic: dict | None = None
    split: dict | None = None
    train: dict = field(default_factory=dict)
    gibbs: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.covmodel not in COVARIATE_MODELS:
            raise ConfigError(f"unknown covariate model {self.covmodel!r}")
        if not 0.0 < self.censor_level < 1.0:
            raise ConfigError("censor_level must lie in (0, 1)")
        self.months = tuple(int(m) for m in self.months)
        window = month_window_days(self.months)
        if self.season_days != window:
            raise ConfigError(
                f"season_days={self.season_days} does not match the "
                f"{window}-day window of months {list(self.months)}"
            )
        real = self.sites_file is not None and self.observations_file is not None
        if real == (self.synthetic is not None):
            raise ConfigError(
                "configure either sites_file+observations_file or a synthetic block"
            )
        if self.synthetic is not None:
            self.synthetic = _checked(self.synthetic, {"d1", "d2", "n", "true_params",
                                                       "extra_covariates"}, "synthetic")
        if self.split is not None:
            self.split = _checked(
                self.split,
                {"train_sites", "test_sites", "train_dates", "test_dates"},
                "split",
            )
            train_sites = set(self.split.get("train_sites", ()))
            test_sites = set(self.split.get("test_sites", ()))
            if train_sites & test_sites:
                raise ConfigError("train and test site splits overlap")
        self.gibbs = {**_GIBBS_DEFAULTS, **_checked(self.gibbs, set(_GIBBS_DEFAULTS) | {"seeds"},
                                                    "gibbs")}
        if self.gibbs["burn_in"] is None:
            self.gibbs["burn_in"] = self.gibbs["n_iter"] // 10
        if not 0 <= self.gibbs["burn_in"] < max(self.gibbs["n_iter"], 1):
            raise ConfigError("burn-in must be shorter than the chain")
        if "seeds" not in self.gibbs:
            self.gibbs["seeds"] = [self.seed + 1000 + c for c in range(self.gibbs["chains"])]
        if len(self.gibbs["seeds"]) != self.gibbs["chains"]:
            raise ConfigError("need one gibbs seed per chain")
        self.metrics = {**_METRIC_DEFAULTS, **_checked(self.metrics, set(_METRIC_DEFAULTS),
                                                       "metrics")}
        _checked(self.train, _TRAIN_KEYS, "train")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["months"] = list(self.months)
        return payload

    def emit(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        payload = _checked(dict(payload), known, "config")
        return cls(**payload)

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return cls.parse(path.read_text(encoding="utf-8"))


_TRAIN_KEYS = {
    "batch_size",
    "sims_budget",
    "heldout_size",
    "eval_every",
    "patience",
    "min_improvement",
    "n_lstm",
    "n_dense",
    "learning_rate",
    "grad_clip",
    "flow_blocks",
    "flow_hidden",
}


def _checked(payload: dict, allowed: set, where: str) -> dict:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys {unknown}; allowed: {sorted(allowed)}")
    return payload
