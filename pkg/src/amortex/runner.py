"""Experiment runner: data resolution, training, sampling, diagnostics, and
the artifact directory with its manifest.

Every numerically meaningful artifact is byte-reproducible for a fixed seed
on a single worker; wall-clock measurements (training logs, chain sidecars,
timing report) are written to separate files listed as volatile in the
manifest, so re-run equality can be checked hash by hash.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import ExperimentConfig, load_observations, load_sites
from .errors import ConfigError, DataError
from .gibbs import gibbs_run, initialize
from .metrics import MetricReport, mqae, mqse, qq_data, return_levels
from .model import (
    COVARIATE_MODELS,
    VARIANTS,
    ParameterVector,
    PriorSpec,
    censor,
    empirical_threshold,
    simulate_panel,
)
from .rng import TAG_DATA, TAG_GIBBS, TAG_METRICS, substream
from .spatial import SiteSet, grid_sites
from .summaries import default_grid
from .training import TrainConfig, train_ralpha, train_rx

__all__ = ["run_experiment", "compare_models", "PRESETS", "preset_config", "write_panel_csv"]

_VOLATILE = ("timing.json", "training_log_ralpha.csv", "training_log_rx.csv")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(",".join(header) + "\n")
        for row in rows:
            handle.write(",".join(_cell(value) for value in row) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_training_log(path: Path, rows):
    header = ["batch_index", "train_loss", "heldout_loss", "wall_ms"]
    out = []
    for row in rows:
        held = "" if row["heldout_loss"] is None else repr(row["heldout_loss"])
        out.append((row["batch_index"], repr(row["train_loss"]), held, repr(row["wall_ms"])))
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(",".join(header) + "\n")
        for cells in out:
            handle.write(",".join(str(c) for c in cells) + "\n")


@dataclass
class _ResolvedData:
    sites: SiteSet            # all sites (train + test)
    train_sites: SiteSet
    train_panel: np.ndarray
    test_sites: SiteSet | None
    test_panel: np.ndarray | None
    truth: dict | None        # known parameters in synthetic mode


def _subset_sites(sites: SiteSet, ids) -> SiteSet:
    index = {sid: i for i, sid in enumerate(sites.site_id)}
    missing = [sid for sid in ids if sid not in index]
    if missing:
        raise ConfigError(f"split references unknown site ids {missing[:5]}")
    rows = [index[sid] for sid in ids]
    return SiteSet(
        tuple(ids),
        sites.coords[rows],
        sites.covariates[rows],
        sites.dist[np.ix_(rows, rows)],
    )


def _resolve_data(cfg: ExperimentConfig) -> _ResolvedData:
    if cfg.synthetic is not None:
        spec = cfg.synthetic
        d1, d2 = int(spec["d1"]), int(spec["d2"])
        rng = substream(cfg.seed, TAG_DATA)
        extra = int(spec.get("extra_covariates", 1))
        sites = grid_sites(d1, d2, extra_covariates=extra, rng=rng)
        covmodel = COVARIATE_MODELS[cfg.covmodel]
        needed = 1 + max((idx for idx, _ in covmodel.terms), default=-1)
        if sites.covariates.shape[1] < needed:
            raise ConfigError(
                f"{cfg.covmodel} needs {needed} covariate columns, grid provides "
                f"{sites.covariates.shape[1]}"
            )
        params = dict(spec["true_params"])
        try:
            gamma = [params.pop(f"gamma{i}") for i in range(covmodel.n_gamma)]
            truth_vector = ParameterVector(gamma=np.asarray(gamma), **params)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad true_params for {cfg.variant}-{cfg.covmodel}: {exc}")
        truth_vector.validate_for(VARIANTS[cfg.variant], covmodel)
        panel = simulate_panel(
            sites, covmodel, VARIANTS[cfg.variant], truth_vector, int(spec["n"]), rng
        )
        return _ResolvedData(sites, sites, panel, None, None, truth_vector.as_dict())

    sites_path, obs_path = Path(cfg.sites_file), Path(cfg.observations_file)
    for path in (sites_path, obs_path):
        if not path.exists():
            raise ConfigError(f"referenced file {path} does not exist")
    sites = load_sites(sites_path)
    values, dates = load_observations(obs_path, sites, cfg.months)
    if cfg.split is None:
        return _ResolvedData(sites, sites, values, None, None, None)

    split = cfg.split
    train_sites = _subset_sites(sites, split.get("train_sites", list(sites.site_id)))
    test_ids = split.get("test_sites", [])
    test_sites = _subset_sites(sites, test_ids) if test_ids else None
    date_arr = np.array([d.isoformat() for d in dates])

    def date_mask(bounds):
        if not bounds:
            return np.ones(len(dates), dtype=bool)
        lo, hi = bounds
        return (date_arr >= lo) & (date_arr <= hi)

    col = {sid: j for j, sid in enumerate(sites.site_id)}
    train_rows = date_mask(split.get("train_dates"))
    if not train_rows.any():
        raise DataError("train date window selects no rows")
    train_panel = values[np.ix_(train_rows, [col[s] for s in train_sites.site_id])]
    test_panel = None
    if test_sites is not None:
        test_rows = date_mask(split.get("test_dates"))
        if not test_rows.any():
            raise DataError("test date window selects no rows")
        test_panel = values[np.ix_(test_rows, [col[s] for s in test_sites.site_id])]
    return _ResolvedData(sites, train_sites, train_panel, test_sites, test_panel, None)


def _train_config(cfg: ExperimentConfig, data: _ResolvedData) -> TrainConfig:
    d = data.train_sites.n_sites
    if cfg.synthetic is not None:
        d1, d2 = int(cfg.synthetic["d1"]), int(cfg.synthetic["d2"])
    else:
        d1, d2 = default_grid(d)
    return TrainConfig(
        variant=cfg.variant,
        covmodel=cfg.covmodel,
        n=data.train_panel.shape[0],
        d=d,
        d1=d1,
        d2=d2,
        censor_level=cfg.censor_level,
        seed=cfg.seed,
        **cfg.train,
    )


def _panel_simulator(sites, covmodel, variant, names, thresholds):
    """Simulator closure for the quantile metrics: simulate under a draw,
    censor at the observed thresholds so both panels share the convention."""

    def simulator(theta_row, n, rng):
        theta = theta_row if isinstance(theta_row, ParameterVector) else (
            _chain_theta(names, theta_row)
        )
        panel = simulate_panel(sites, covmodel, variant, theta, n, rng)
        return censor(panel, thresholds).values

    return simulator


def _chain_theta(names, row) -> ParameterVector:
    values = dict(zip(names, (float(v) for v in row)))
    n_gamma = sum(1 for name in names if name.startswith("gamma"))
    gamma = [values.pop(f"gamma{i}") for i in range(n_gamma)]
    return ParameterVector(gamma=np.asarray(gamma), **values)


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Run every stage and return the artifact directory.

    On failure the directory keeps the outputs of completed stages plus an
    error manifest naming the failed stage.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "resolve-data"
    timing: dict = {}
    try:
        tic = time.perf_counter()
        data = _resolve_data(cfg)
        timing["resolve_data_s"] = time.perf_counter() - tic

        echo = cfg.to_dict()
        echo["output_dir"] = "."  # keep artifacts location-independent
        _write_json(out / "config_echo.json", echo)

        stage = "train"
        tic = time.perf_counter()
        train_cfg = _train_config(cfg, data)
        prior = PriorSpec.default(data.train_sites)
        est_alpha, log_a = train_ralpha(train_cfg, data.train_sites, prior)
        est_x, log_x = train_rx(train_cfg, data.train_sites, prior)
        est_alpha.save(out / "ralpha.amx")
        est_x.save(out / "rx.amx")
        _write_training_log(out / "training_log_ralpha.csv", log_a)
        _write_training_log(out / "training_log_rx.csv", log_x)
        timing["train_s"] = time.perf_counter() - tic

        stage = "gibbs"
        tic = time.perf_counter()
        thresholds = empirical_threshold(data.train_panel, cfg.censor_level)
        censored = censor(data.train_panel, thresholds)
        checkpoint_hashes = {
            "ralpha.amx": _sha256(out / "ralpha.amx"),
            "rx.amx": _sha256(out / "rx.amx"),
        }
        chains = []
        for c, chain_seed in enumerate(cfg.gibbs["seeds"]):
            rng = substream(int(chain_seed), TAG_GIBBS)
            init = initialize(prior, cfg.variant, rng)
            chain = gibbs_run(
                est_alpha, est_x, censored, init, int(cfg.gibbs["n_iter"]), rng,
                chain_id=c, seed=int(chain_seed),
            )
            chain.extra["checkpoint_hashes"] = checkpoint_hashes
            chain.to_csv(out / f"chain_{c:02d}.csv")
            _write_json(out / f"chain_{c:02d}_meta.json", chain.metadata())
            chains.append(chain)
        timing["gibbs_s"] = time.perf_counter() - tic

        stage = "diagnostics"
        tic = time.perf_counter()
        burn = int(cfg.gibbs["burn_in"])
        names = list(chains[0].param_names)
        combined = np.vstack([chain.draws[burn:] for chain in chains])
        wall_minutes = sum(chain.wall_minutes for chain in chains)
        report = MetricReport.from_chain(
            names, combined, truth=data.truth, wall_minutes=max(wall_minutes, 1e-9)
        )

        mcfg = cfg.metrics
        rng_metrics = substream(cfg.seed, TAG_METRICS)
        n_draws = min(int(mcfg["posterior_draws"]), combined.shape[0])
        idx = np.linspace(0, combined.shape[0] - 1, n_draws).astype(int)
        theta_draws = [_chain_theta(names, combined[i]) for i in idx]
        theta_mean = _chain_theta(names, combined.mean(axis=0))
        variant = VARIANTS[cfg.variant]
        covmodel = COVARIATE_MODELS[cfg.covmodel]

        splits = [("train", data.train_sites, data.train_panel)]
        if data.test_sites is not None:
            splits.append(("test", data.test_sites, data.test_panel))
        for label, split_sites, split_panel in splits:
            split_thresholds = empirical_threshold(split_panel, cfg.censor_level)
            observed = censor(split_panel, split_thresholds).values
            simulator = _panel_simulator(split_sites, covmodel, variant, names,
                                         split_thresholds)
            report.dataset[f"mqae_{label}"] = mqae(
                observed, theta_draws, simulator, c_u=int(mcfg["c_u"]),
                sims_per_draw=int(mcfg["sims_per_draw"]), rng=rng_metrics.spawn(1)[0],
            )
            report.dataset[f"mqse_{label}"] = mqse(
                observed, theta_draws, simulator, c_u=int(mcfg["c_u"]),
                sims_per_draw=int(mcfg["sims_per_draw"]), rng=rng_metrics.spawn(1)[0],
            )
            # per-site decomposition (map-style table) and QQ data
            site_rows = []
            qq_rows = []
            n_qq = int(mcfg["qq_sites"])
            qq_site_ids = list(split_sites.site_id)[:: max(1, split_sites.n_sites // n_qq)][:n_qq]
            for j, sid in enumerate(split_sites.site_id):
                one_site = _subset_sites(split_sites, [sid])
                one_simulator = _panel_simulator(one_site, covmodel, variant, names,
                                                 split_thresholds[j: j + 1])
                value = mqae(observed[:, [j]], theta_draws, one_simulator,
                             c_u=int(mcfg["c_u"]), sims_per_draw=int(mcfg["sims_per_draw"]),
                             rng=rng_metrics.spawn(1)[0])
                site_rows.append((sid, float(split_sites.coords[j, 0]),
                                  float(split_sites.coords[j, 1]), value))
                if sid in qq_site_ids:
                    rows = qq_data(
                        observed[:, j], theta_mean, one_simulator,
                        np.asarray(mcfg["qq_probs"], dtype=float),
                        band_reps=int(mcfg["qq_band_reps"]), rng=rng_metrics.spawn(1)[0],
                    )
                    qq_rows += [(sid, *row) for row in rows]
            _write_csv(out / f"mqae_by_site_{label}.csv",
                       ["site_id", "lon", "lat", "mqae"], site_rows)
            _write_csv(out / f"qq_{label}.csv",
                       ["site_id", "prob", "observed", "fitted", "band_lower", "band_upper"],
                       qq_rows)

        report.dataset["c_u"] = int(mcfg["c_u"])
        periods = [float(p) for p in mcfg["return_periods"]]
        rl_simulator = _panel_simulator(data.train_sites, covmodel, variant, names,
                                        thresholds)
        rl_draws = theta_draws[:: max(1, len(theta_draws) // 20)]
        table = return_levels(
            rl_draws, rl_simulator, data.train_sites, periods,
            season_days=cfg.season_days, rng=rng_metrics.spawn(1)[0],
        )
        _write_csv(out / "return_levels.csv",
                   ["site_id", "period_years", "median", "band_lower", "band_upper"],
                   table.rows())
        (out / "metric_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
        timing["diagnostics_s"] = time.perf_counter() - tic
        timing["ess_per_min"] = report.timing.get("ess_per_min", {})
        timing["gibbs_wall_minutes"] = wall_minutes
        _write_json(out / "timing.json", timing)

        stage = "manifest"
        volatile = [name for name in _VOLATILE if (out / name).exists()]
        volatile += sorted(p.name for p in out.glob("chain_*_meta.json"))
        hashes = {
            p.name: _sha256(p)
            for p in sorted(out.iterdir())
            if p.is_file() and p.name not in volatile and p.name != "manifest.json"
        }
        _write_json(out / "manifest.json",
                    {"config": echo, "artifacts": hashes, "volatile": sorted(volatile)})
        return out
    except Exception as exc:
        _write_json(out / "error_manifest.json",
                    {"stage": stage, "error": type(exc).__name__, "message": str(exc)})
        raise


def compare_models(result_dirs, criterion: str = "mqae", split: str = "train"):
    """Rank experiment directories by a quantile-error criterion.

    Ties break on the other criterion, then on directory name.  All
    directories must carry the requested split.
    """
    if criterion not in ("mqae", "mqse"):
        raise ConfigError("criterion must be 'mqae' or 'mqse'")
    if split not in ("train", "test"):
        raise ConfigError("split must be 'train' or 'test'")
    if len(result_dirs) < 2:
        raise ConfigError("need at least two result directories to compare")
    other = "mqse" if criterion == "mqae" else "mqae"
    rows = []
    for directory in result_dirs:
        directory = Path(directory)
        report_path = directory / "metric_report.json"
        if not report_path.exists():
            raise ConfigError(f"{directory} has no metric report")
        dataset = json.loads(report_path.read_text())["dataset"]
        key, other_key = f"{criterion}_{split}", f"{other}_{split}"
        if key not in dataset:
            raise ConfigError(f"{directory} lacks {key} (mismatched split)")
        rows.append(
            {
                "name": directory.name,
                "path": str(directory),
                criterion: dataset[key],
                other: dataset.get(other_key),
            }
        )
    rows.sort(key=lambda r: (r[criterion], r[other] if r[other] is not None else 0.0,
                             r["name"]))
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
    return rows


def write_panel_csv(path, panel: np.ndarray, site_ids, start_date="2015-09-01"):
    """Write a simulated panel in the observation-file layout."""
    import datetime

    date = datetime.date.fromisoformat(start_date)
    rows = []
    for t in range(panel.shape[0]):
        rows.append((date.isoformat(), *[repr(float(v)) for v in panel[t]]))
        date += datetime.timedelta(days=1)
    _write_csv(Path(path), ["date", *site_ids], rows)


# ----------------------------------------------------------------------------
# presets

PRESETS = ("smoke", "sim-study", "guanacaste-d4m5")


def preset_config(name: str, output_dir, seed: int = 0, sites_file=None,
                  observations_file=None) -> ExperimentConfig:
    """Shipped experiment presets.

    smoke: minutes-scale end-to-end run. sim-study: the synthetic-data
    protocol on a reduced grid with the study's true parameter values.
    guanacaste-d4m5: the application's chosen model; needs user data files.
    """
    if name == "smoke":
        return ExperimentConfig(
            variant="D4",
            covmodel="M3",
            seed=seed,
            output_dir=str(output_dir),
            synthetic={
                "d1": 4, "d2": 4, "n": 50, "extra_covariates": 1,
                "true_params": {"gamma0": 1.0, "gamma1": 1.0, "gamma2": 1.0,
                                 "phi": 0.7, "sigma": 1.0, "beta3": 5.0, "rho": 0.5},
            },
            train={"batch_size": 32, "sims_budget": 4096, "heldout_size": 128,
                   "eval_every": 16, "n_lstm": 32, "n_dense": 32},
            gibbs={"n_iter": 500, "chains": 2},
            metrics={"posterior_draws": 20, "qq_band_reps": 50,
                     "return_periods": [2, 5, 10]},
        )
    if name == "sim-study":
        # the synthetic protocol: unit-square grid, gamma0 = e, unit slopes
        return ExperimentConfig(
            variant="D4",
            covmodel="M4",
            seed=seed,
            output_dir=str(output_dir),
            synthetic={
                "d1": 10, "d2": 10, "n": 200, "extra_covariates": 1,
                "true_params": {"gamma0": float(np.e), "gamma1": 1.0, "gamma2": 1.0,
                                 "gamma3": 1.0, "phi": 0.7, "sigma": 1.0,
                                 "beta3": 5.0, "rho": 0.5},
            },
            train={"n_lstm": 128, "n_dense": 128, "sims_budget": 16384},
            gibbs={"n_iter": 2000, "chains": 2},
        )
    if name == "guanacaste-d4m5":
        if sites_file is None or observations_file is None:
            raise ConfigError("the guanacaste-d4m5 preset needs sites and observation files")
        return ExperimentConfig(
            variant="D4",
            covmodel="M5",
            seed=seed,
            output_dir=str(output_dir),
            sites_file=str(sites_file),
            observations_file=str(observations_file),
            train={"n_lstm": 1024, "n_dense": 128, "sims_budget": 128000},
            gibbs={"n_iter": 10000, "chains": 2},
        )
    raise ConfigError(f"unknown preset {name!r}; available: {list(PRESETS)}")
