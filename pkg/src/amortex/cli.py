"""Command-line thin client.

Each subcommand fills the same request model the HTTP service consumes and
dispatches it either in-process (default) or to a running service via
``--server``.  Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 data
error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
from pydantic import ValidationError

from .errors import AmortexError
from .service import ops, schemas

_EXIT_BY_ERROR = {"ConfigError": 2, "NumericError": 3, "DataError": 4,
                  "DecompositionError": 3}


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _read_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        _fail(f"config file {path} does not exist", 2)
    except json.JSONDecodeError as exc:
        _fail(f"config file {path} is not valid JSON: {exc}", 2)


def _build(model, payload: dict):
    try:
        return model(**payload)
    except ValidationError as exc:
        _fail(f"invalid request: {exc}", 2)


def _dispatch(ctx, name: str, request):
    server = ctx.obj.get("server")
    if server is None:
        try:
            return getattr(ops, name)(request)
        except AmortexError as exc:
            _fail(str(exc), exc.exit_code)
    import httpx

    try:
        reply = httpx.post(f"{server.rstrip('/')}/{name}",
                           json=json.loads(request.model_dump_json()), timeout=None)
    except httpx.HTTPError as exc:
        _fail(f"cannot reach service at {server}: {exc}", 1)
    if reply.status_code != 200:
        try:
            body = reply.json()
            _fail(body.get("message", reply.text), int(body.get("code", 1)))
        except (ValueError, KeyError):
            _fail(f"service returned HTTP {reply.status_code}: {reply.text}", 1)
    return reply.json()


def _emit(response):
    if hasattr(response, "model_dump_json"):
        click.echo(response.model_dump_json(indent=2))
    else:
        click.echo(json.dumps(response, indent=2))


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Send requests to a running service instead of running in-process.")
@click.pass_context
def main(ctx, server):
    """Spatio-temporal extremes with amortized flow-based Gibbs inference."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@click.option("--config", type=click.Path(), help="JSON file with request fields.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Write panel.csv and sites.csv here.")
@click.option("--variant", default=None)
@click.option("--covmodel", default=None)
@click.option("--n", type=int, default=None)
@click.option("--censor-level", type=float, default=None)
@click.pass_context
def simulate(ctx, config, seed, out_dir, variant, covmodel, n, censor_level):
    """Simulate a synthetic panel from the generative model."""
    payload = _read_config(config)
    for key, value in (("seed", seed), ("out_dir", out_dir), ("variant", variant),
                       ("covmodel", covmodel), ("n", n), ("censor_level", censor_level)):
        if value is not None:
            payload[key] = value
    _emit(_dispatch(ctx, "simulate", _build(schemas.SimulateRequest, payload)))


@main.command()
@click.option("--config", type=click.Path(), help="JSON file with request fields.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None, required=False)
@click.pass_context
def train(ctx, config, seed, out_dir):
    """Train the estimator pair on prior-predictive simulations."""
    payload = _read_config(config)
    if seed is not None:
        payload["seed"] = seed
    if out_dir is not None:
        payload["out_dir"] = out_dir
    _emit(_dispatch(ctx, "train", _build(schemas.TrainRequest, payload)))


@main.command()
@click.option("--config", type=click.Path(), help="JSON file with request fields.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.pass_context
def gibbs(ctx, config, seed, out_dir):
    """Sample the joint posterior with the two-block amortized Gibbs scan."""
    payload = _read_config(config)
    if seed is not None:
        payload["seed"] = seed
    if out_dir is not None:
        payload["out_dir"] = out_dir
    _emit(_dispatch(ctx, "gibbs", _build(schemas.GibbsRequest, payload)))


@main.command()
@click.option("--config", type=click.Path(), help="JSON file with request fields.")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--chain", "chain_files", multiple=True, type=click.Path(),
              help="Chain CSV (repeatable).")
@click.option("--burn-in", type=int, default=None)
@click.pass_context
def diagnose(ctx, config, out_dir, chain_files, burn_in):
    """Summarize chains and, given a checkpoint and data, tail diagnostics."""
    payload = _read_config(config)
    if chain_files:
        payload["chain_files"] = list(chain_files)
    if out_dir is not None:
        payload["out_dir"] = out_dir
    if burn_in is not None:
        payload["burn_in"] = burn_in
    _emit(_dispatch(ctx, "diagnose", _build(schemas.DiagnoseRequest, payload)))


@main.command()
@click.option("--config", type=click.Path(), help="Full experiment config JSON.")
@click.option("--preset", type=click.Choice(["smoke", "sim-study", "guanacaste-d4m5"]),
              default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--sites-file", type=click.Path(), default=None)
@click.option("--observations-file", type=click.Path(), default=None)
@click.pass_context
def experiment(ctx, config, preset, seed, out_dir, sites_file, observations_file):
    """Run the full pipeline: data, training, sampling, diagnostics."""
    payload = {
        "config": _read_config(config) if config else None,
        "preset": preset,
        "seed": seed,
        "out_dir": out_dir,
        "sites_file": sites_file,
        "observations_file": observations_file,
    }
    _emit(_dispatch(ctx, "experiment", _build(schemas.ExperimentRequest, payload)))


@main.command()
@click.argument("result_dirs", nargs=-1, type=click.Path())
@click.option("--criterion", type=click.Choice(["mqae", "mqse"]), default="mqae")
@click.option("--split", type=click.Choice(["train", "test"]), default="train")
@click.pass_context
def compare(ctx, result_dirs, criterion, split):
    """Rank finished experiment directories by upper-tail quantile error."""
    request = _build(schemas.CompareRequest,
                     {"result_dirs": list(result_dirs), "criterion": criterion,
                      "split": split})
    _emit(_dispatch(ctx, "compare", request))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
def serve(host, port):
    """Start the HTTP service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
