"""Service operations: the single implementation behind both the HTTP
endpoints and the in-process CLI calls."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from .. import __version__
from ..dataio import ExperimentConfig
from ..errors import ConfigError, DataError
from ..estimator import TrainedEstimator
from ..gibbs import gibbs_run, initialize
from ..metrics import MetricReport, mqae, mqse, return_levels
from ..model import (
    COVARIATE_MODELS,
    VARIANTS,
    ParameterVector,
    PriorSpec,
    censor,
    empirical_threshold,
    simulate_panel,
)
from ..rng import TAG_DATA, TAG_GIBBS, substream
from ..runner import (
    PRESETS,
    _chain_theta,
    _panel_simulator,
    compare_models,
    preset_config,
    run_experiment,
    write_panel_csv,
)
from ..spatial import grid_sites
from ..training import SCENARIO_CAPACITIES, TrainConfig, train_ralpha, train_rx
from ..summaries import default_grid
from . import schemas

__all__ = [
    "health",
    "catalog",
    "simulate",
    "train",
    "gibbs",
    "diagnose",
    "experiment",
    "compare",
]


def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)


def catalog() -> schemas.CatalogResponse:
    return schemas.CatalogResponse(
        variants={name: asdict(variant) for name, variant in VARIANTS.items()},
        covariate_models={
            name: [list(term) for term in model.terms]
            for name, model in COVARIATE_MODELS.items()
        },
        presets=list(PRESETS),
        scenarios=SCENARIO_CAPACITIES,
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _theta_from_request(params: dict, variant, covmodel) -> ParameterVector:
    params = dict(params)
    try:
        gamma = [params.pop(f"gamma{i}") for i in range(covmodel.n_gamma)]
        theta = ParameterVector(gamma=np.asarray(gamma, dtype=float), **params)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad true_params: {exc}")
    theta.validate_for(variant, covmodel)
    return theta


def simulate(req: schemas.SimulateRequest) -> schemas.SimulateResponse:
    variant = VARIANTS.get(req.variant)
    covmodel = COVARIATE_MODELS.get(req.covmodel)
    if variant is None or covmodel is None:
        raise ConfigError(f"unknown variant/covariate model {req.variant}/{req.covmodel}")
    rng = substream(req.seed, TAG_DATA)
    sites = grid_sites(req.d1, req.d2, extra_covariates=req.extra_covariates, rng=rng)
    needed = 1 + max((idx for idx, _ in covmodel.terms), default=-1)
    if sites.covariates.shape[1] < needed:
        raise ConfigError(f"{req.covmodel} needs {needed} covariate columns")
    theta = _theta_from_request(req.true_params, variant, covmodel)
    panel = simulate_panel(sites, covmodel, variant, theta, req.n, rng)
    thresholds = None
    if req.censor_level is not None:
        thresholds = empirical_threshold(panel, req.censor_level)
        panel = censor(panel, thresholds).values
    panel_file = sites_file = None
    if req.out_dir is not None:
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        panel_path = out / "panel.csv"
        write_panel_csv(panel_path, panel, sites.site_id, start_date=req.start_date)
        sites_path = out / "sites.csv"
        with open(sites_path, "w", encoding="utf-8", newline="\n") as handle:
            extra = [f"z{k}" for k in range(sites.covariates.shape[1] - 2)]
            handle.write(",".join(["site_id", "lon", "lat", "alt", *extra[1:]]) + "\n")
            for i, sid in enumerate(sites.site_id):
                cov = [repr(float(v)) for v in sites.covariates[i]]
                row = [sid, repr(float(sites.coords[i, 0])), repr(float(sites.coords[i, 1]))]
                handle.write(",".join(row + cov[2:]) + "\n")
        panel_file, sites_file = str(panel_path), str(sites_path)
    return schemas.SimulateResponse(
        rows=panel.shape[0],
        sites=list(sites.site_id),
        panel_file=panel_file,
        sites_file=sites_file,
        thresholds=None if thresholds is None else [float(t) for t in thresholds],
        preview=[[float(v) for v in row] for row in panel[:5]],
    )


def train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    if (req.sites_file is None) == (req.grid is None):
        raise ConfigError("provide exactly one of sites_file or grid")
    if req.sites_file is not None:
        from ..dataio import load_sites

        sites = load_sites(req.sites_file)
    else:
        rng = substream(req.seed, TAG_DATA)
        sites = grid_sites(req.grid.d1, req.grid.d2,
                           extra_covariates=req.grid.extra_covariates, rng=rng)
    d1, d2 = default_grid(sites.n_sites)
    cfg = TrainConfig(
        variant=req.variant,
        covmodel=req.covmodel,
        n=req.n,
        d=sites.n_sites,
        d1=d1,
        d2=d2,
        censor_level=req.censor_level,
        seed=req.seed,
        **req.train,
    )
    prior = PriorSpec.default(sites)
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    est_a, log_a = train_ralpha(cfg, sites, prior)
    est_x, log_x = train_rx(cfg, sites, prior)
    path_a, path_x = out / "ralpha.amx", out / "rx.amx"
    est_a.save(path_a)
    est_x.save(path_x)
    from ..runner import _write_training_log

    _write_training_log(out / "training_log_ralpha.csv", log_a)
    _write_training_log(out / "training_log_rx.csv", log_x)

    def last_heldout(log):
        values = [r["heldout_loss"] for r in log if r["heldout_loss"] is not None]
        return float(values[-1]) if values else float("nan")

    return schemas.TrainResponse(
        ralpha_checkpoint=str(path_a),
        rx_checkpoint=str(path_x),
        checkpoint_hashes={path_a.name: _sha256(path_a), path_x.name: _sha256(path_x)},
        final_heldout_loss={"ralpha": last_heldout(log_a), "rx": last_heldout(log_x)},
        batches_run={"ralpha": len(log_a), "rx": len(log_x)},
    )


def _load_panel_for(est: TrainedEstimator, observations_file, months):
    from ..dataio import load_observations

    months = tuple(months) if months else (9, 10, 11, 12)
    values, _ = load_observations(observations_file, est.sites, months)
    return values


def gibbs(req: schemas.GibbsRequest) -> schemas.GibbsResponse:
    est_a = TrainedEstimator.load(req.ralpha_checkpoint)
    est_x = TrainedEstimator.load(req.rx_checkpoint)
    values = _load_panel_for(est_a, req.observations_file, req.months)
    censored = censor(values, empirical_threshold(values, req.censor_level))
    seeds = req.seeds if req.seeds is not None else [req.seed + 1000 + c
                                                    for c in range(req.chains)]
    if len(seeds) != req.chains:
        raise ConfigError("need one seed per chain")
    out = Path(req.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    chain_files, meta_files = [], []
    last = None
    for c, chain_seed in enumerate(seeds):
        rng = substream(int(chain_seed), TAG_GIBBS)
        init = initialize(est_a.prior, est_a.variant_name, rng)
        chain = gibbs_run(est_a, est_x, censored, init, req.n_iter, rng,
                          chain_id=c, seed=int(chain_seed))
        chain_path = out / f"chain_{c:02d}.csv"
        meta_path = out / f"chain_{c:02d}_meta.json"
        chain.to_csv(chain_path)
        meta_path.write_text(json.dumps(chain.metadata(), indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
        chain_files.append(str(chain_path))
        meta_files.append(str(meta_path))
        last = chain
    means = {}
    if last is not None and len(last) > 0:
        stacked = np.vstack([pd.read_csv(f).iloc[:, 1:].to_numpy() for f in chain_files])
        means = {name: float(stacked[:, j].mean())
                 for j, name in enumerate(last.param_names)}
    return schemas.GibbsResponse(
        chain_files=chain_files,
        meta_files=meta_files,
        param_names=list(last.param_names) if last is not None else [],
        posterior_means=means,
    )


def diagnose(req: schemas.DiagnoseRequest) -> schemas.DiagnoseResponse:
    if not req.chain_files:
        raise ConfigError("need at least one chain file")
    frames = []
    names = None
    for path in req.chain_files:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"chain file {path} does not exist")
        frame = pd.read_csv(path)
        if frame.columns[0] != "iteration":
            raise DataError(f"{path}: not a chain file")
        cols = list(frame.columns[1:])
        if names is None:
            names = cols
        elif cols != names:
            raise ConfigError("chain files disagree on parameter columns")
        if req.burn_in >= len(frame):
            raise ConfigError("burn-in not shorter than the chain")
        frames.append(frame.iloc[req.burn_in:, 1:].to_numpy(dtype=float))
    combined = np.vstack(frames)
    report = MetricReport.from_chain(names, combined, truth=req.truth,
                                     wall_minutes=req.wall_minutes)

    files = []
    have_model = req.ralpha_checkpoint and req.observations_file
    if have_model:
        est_a = TrainedEstimator.load(req.ralpha_checkpoint)
        values = _load_panel_for(est_a, req.observations_file, req.months)
        thresholds = empirical_threshold(values, req.censor_level)
        observed = censor(values, thresholds).values
        variant = VARIANTS[est_a.variant_name]
        covmodel = COVARIATE_MODELS[est_a.covmodel_name]
        simulator = _panel_simulator(est_a.sites, covmodel, variant, names, thresholds)
        n_draws = min(req.posterior_draws, combined.shape[0])
        idx = np.linspace(0, combined.shape[0] - 1, n_draws).astype(int)
        draws = [_chain_theta(names, combined[i]) for i in idx]
        rng = substream(0, TAG_GIBBS, 999)
        report.dataset["mqae_train"] = mqae(observed, draws, simulator, c_u=req.c_u,
                                            rng=rng.spawn(1)[0])
        report.dataset["mqse_train"] = mqse(observed, draws, simulator, c_u=req.c_u,
                                            rng=rng.spawn(1)[0])
        report.dataset["c_u"] = req.c_u
        if req.out_dir is not None:
            out = Path(req.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            table = return_levels(draws[:: max(1, len(draws) // 20)], simulator,
                                  est_a.sites, req.return_periods,
                                  season_days=req.season_days, rng=rng.spawn(1)[0])
            rl_path = out / "return_levels.csv"
            with open(rl_path, "w", encoding="utf-8", newline="\n") as handle:
                handle.write("site_id,period_years,median,band_lower,band_upper\n")
                for row in table.rows():
                    handle.write(",".join(str(c) if not isinstance(c, float) else repr(c)
                                          for c in row) + "\n")
            files.append(str(rl_path))
    if req.out_dir is not None:
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "metric_report.json"
        report_path.write_text(report.to_json() + "\n", encoding="utf-8")
        files.append(str(report_path))
        if report.timing:
            timing_path = out / "metric_timing.json"
            timing_path.write_text(report.timing_json() + "\n", encoding="utf-8")
            files.append(str(timing_path))
    return schemas.DiagnoseResponse(report=report.body_dict(), timing=report.timing,
                                    files=files)


def experiment(req: schemas.ExperimentRequest) -> schemas.ExperimentResponse:
    if (req.config is None) == (req.preset is None):
        raise ConfigError("provide exactly one of config or preset")
    if req.preset is not None:
        if req.out_dir is None:
            raise ConfigError("a preset experiment needs out_dir")
        cfg = preset_config(req.preset, req.out_dir, seed=req.seed or 0,
                            sites_file=req.sites_file,
                            observations_file=req.observations_file)
    else:
        payload = dict(req.config)
        if req.seed is not None:
            payload["seed"] = req.seed
        if req.out_dir is not None:
            payload["output_dir"] = req.out_dir
        cfg = ExperimentConfig.from_dict(payload)
    out = run_experiment(cfg)
    manifest = json.loads((out / "manifest.json").read_text())
    report = json.loads((out / "metric_report.json").read_text())
    return schemas.ExperimentResponse(
        artifact_dir=str(out),
        artifacts=manifest["artifacts"],
        volatile=manifest["volatile"],
        dataset_metrics=report["dataset"],
    )


def compare(req: schemas.CompareRequest) -> schemas.CompareResponse:
    return schemas.CompareResponse(
        ranking=compare_models(req.result_dirs, criterion=req.criterion, split=req.split)
    )
