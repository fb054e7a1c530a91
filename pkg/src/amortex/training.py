"""Online amortized training of the two estimator pairs.

Each batch draws fresh parameters from the prior, simulates censored panels,
and takes one gradient step on the flow/summary pair; no simulation is ever
reused.  A fixed held-out set, drawn before training, drives early stopping;
the kept checkpoint is the best held-out one, which by construction is never
worse than the initial state.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .estimator import TrainedEstimator
from .flow import CouplingFlow, SupportTransform, flow_loss
from .model import (
    COVARIATE_MODELS,
    VARIANTS,
    ParameterVector,
    PriorSpec,
    censor,
    empirical_threshold,
    hyper_column_names,
    sample_prior,
    simulate_factor_panel,
    simulate_panel,
    theta_x_names,
)
from .rng import TAG_HELDOUT, TAG_TRAIN, substream
from .spatial import SiteSet
from .summaries import RAlphaNet, RXNet, assemble_ralpha_input, assemble_rx_input, default_grid

__all__ = [
    "TrainConfig",
    "SCENARIO_CAPACITIES",
    "fit_amortized",
    "train_ralpha",
    "train_rx",
    "validate_recovery",
]

# summary-network capacities (n_lstm, n_dense) studied at full scale
SCENARIO_CAPACITIES = {1: (128, 128), 2: (1024, 128), 3: (128, 1024), 4: (1024, 1024), 5: (1000, 2000)}

_PHASE_RALPHA = 0
_PHASE_RX = 1


@dataclass
class TrainConfig:
    variant: str = "D4"
    covmodel: str = "M3"
    n: int = 100
    d: int = 16
    d1: int | None = None
    d2: int | None = None
    batch_size: int = 64
    sims_budget: int = 16384
    heldout_size: int = 512
    eval_every: int = 25
    patience: int = 20
    min_improvement: float = 1e-3
    seed: int = 0
    n_lstm: int = 128
    n_dense: int = 128
    censor_level: float = 0.75
    learning_rate: float = 5e-4
    weight_decay: float = 0.0
    grad_clip: float = 5.0
    flow_blocks: int = 6
    flow_hidden: int = 64
    # fraction of the simulation budget spent on a summary-regression warmup
    # before flow training; at desk budgets pure joint training collapses the
    # summary onto marginal-dispersion features and never conditions on the
    # temporal/spatial parameters
    warmup_fraction: float = 0.25

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if not 0.0 < self.censor_level < 1.0:
            raise ConfigError("censoring level must lie in (0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.covmodel not in COVARIATE_MODELS:
            raise ConfigError(f"unknown covariate model {self.covmodel!r}")
        if self.sims_budget < self.batch_size:
            raise ConfigError("simulation budget smaller than one batch")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup fraction must lie in [0, 1)")
        if self.d1 is None or self.d2 is None:
            self.d1, self.d2 = default_grid(self.d)
        if self.d1 * self.d2 != self.d:
            raise ConfigError(f"grid {self.d1}x{self.d2} does not tile {self.d} sites")

    @property
    def max_batches(self) -> int:
        return self.sims_budget // self.batch_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _Phase:
    """Everything one training phase needs to make and consume examples."""

    tag: int
    net: torch.nn.Module
    transform: SupportTransform
    make_example: object  # rng -> (input ndarray, target vector)
    input_to_tensor: object


def fit_amortized(cfg: TrainConfig, net, flow, transform, make_example, phase_tag=0):
    """Run the online training loop on an arbitrary simulator.

    ``make_example(rng)`` returns one (summary-input, target-vector) pair;
    only the loop knobs of ``cfg`` are used.  Returns the training-log rows;
    ``net`` and ``flow`` are left holding the best held-out checkpoint.
    """
    phase = _Phase(phase_tag, net, transform, make_example, torch.as_tensor)
    return _train_phase(cfg, phase, flow)


def _gamma_names(covmodel) -> list:
    return [f"gamma{i}" for i in range(covmodel.n_gamma)]


def _hyper_moments(prior: PriorSpec, names) -> tuple:
    loc = np.array([prior.dist_for(name).mean for name in names])
    scale = np.array([prior.dist_for(name).sd for name in names])
    return loc, scale


def _sample_theta_x(prior, variant, rng) -> dict:
    values = {}
    for name in theta_x_names(variant):
        draw = float(prior.dist_for(name).sample(rng))
        if name == "rho":
            while draw <= 0.0:
                draw = float(prior.dist_for(name).sample(rng))
        values[name] = draw
    return values


def _train_phase(cfg: TrainConfig, phase: _Phase, flow: CouplingFlow):
    heldout_inputs, heldout_targets = [], []
    for i in range(cfg.heldout_size):
        rng = substream(cfg.seed, TAG_HELDOUT, phase.tag, i)
        example_input, target = phase.make_example(rng)
        heldout_inputs.append(example_input)
        heldout_targets.append(target)
    heldout_x = phase.input_to_tensor(np.stack(heldout_inputs))
    heldout_u = torch.as_tensor(phase.transform.forward(np.stack(heldout_targets)))

    def heldout_loss() -> float:
        phase.net.eval()
        flow.eval()
        with torch.no_grad():
            value = float(flow_loss(flow, heldout_u, phase.net(heldout_x)))
        phase.net.train()
        flow.train()
        return value

    def snapshot():
        return {
            "net": {k: v.detach().clone() for k, v in phase.net.state_dict().items()},
            "flow": {k: v.detach().clone() for k, v in flow.state_dict().items()},
        }

    def make_batch(batch_idx):
        inputs, targets = [], []
        for m in range(cfg.batch_size):
            rng = substream(cfg.seed, TAG_TRAIN, phase.tag, batch_idx, m)
            example_input, target = phase.make_example(rng)
            inputs.append(example_input)
            targets.append(target)
        x = phase.input_to_tensor(np.stack(inputs))
        u = torch.as_tensor(phase.transform.forward(np.stack(targets)))
        return x, u

    def guarded_step(optimizer, params, compute_loss, batch_idx, best_state):
        optimizer.zero_grad()
        try:
            loss = compute_loss()
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite training loss at batch {batch_idx}")
        except NumericError as error:
            error.last_good_state = best_state
            raise
        loss.backward()
        for p in params:
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                error = NumericError(f"non-finite gradient at batch {batch_idx}")
                error.last_good_state = best_state
                raise error
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        optimizer.step()
        return float(loss.detach())

    # the untouched flow is the identity, so the held-out flow loss before
    # and during the warmup is the fixed baseline the early stop compares to
    start_loss = heldout_loss()
    best_loss = start_loss
    best_state = snapshot()
    strikes = 0
    log_rows = []

    warmup_batches = int(cfg.max_batches * cfg.warmup_fraction)
    if warmup_batches:
        with torch.no_grad():
            cond_dim = phase.net(heldout_x[:1]).shape[-1]
        head = torch.nn.Linear(cond_dim, heldout_u.shape[-1], dtype=heldout_u.dtype)
        torch.nn.init.zeros_(head.weight)
        torch.nn.init.zeros_(head.bias)
        warm_params = list(phase.net.parameters()) + list(head.parameters())
        warm_opt = torch.optim.Adam(warm_params, lr=cfg.learning_rate,
                                    weight_decay=cfg.weight_decay)
        for batch_idx in range(warmup_batches):
            tic = time.perf_counter()
            x, u = make_batch(batch_idx)
            value = guarded_step(
                warm_opt,
                warm_params,
                lambda: (head(phase.net(x)) - u).square().sum(dim=-1).mean(),
                batch_idx,
                best_state,
            )
            log_rows.append(
                {
                    "batch_index": batch_idx,
                    "train_loss": value,
                    "heldout_loss": None,
                    "wall_ms": (time.perf_counter() - tic) * 1000.0,
                }
            )
        best_state = snapshot()

    params = list(phase.net.parameters()) + list(flow.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate,
                                 weight_decay=cfg.weight_decay)
    flow_batches = cfg.max_batches - warmup_batches
    for step, batch_idx in enumerate(range(warmup_batches, cfg.max_batches)):
        tic = time.perf_counter()
        x, u = make_batch(batch_idx)

        # cosine decay over the remaining simulation budget
        lr = cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / flow_batches))
        for group in optimizer.param_groups:
            group["lr"] = lr

        value = guarded_step(
            optimizer, params, lambda: flow_loss(flow, u, phase.net(x)), batch_idx,
            best_state,
        )
        row = {
            "batch_index": batch_idx,
            "train_loss": value,
            "heldout_loss": None,
            "wall_ms": (time.perf_counter() - tic) * 1000.0,
        }
        if (batch_idx + 1) % cfg.eval_every == 0 or batch_idx == cfg.max_batches - 1:
            current = heldout_loss()
            row["heldout_loss"] = current
            if best_loss - current > cfg.min_improvement:
                best_loss = current
                best_state = snapshot()
                strikes = 0
            else:
                strikes += 1
            if strikes >= cfg.patience:
                log_rows.append(row)
                break
        log_rows.append(row)

    phase.net.load_state_dict(best_state["net"])
    flow.load_state_dict(best_state["flow"])
    phase.net.eval()
    flow.eval()
    assert heldout_loss() <= start_loss + 1e-12
    return log_rows


def _build_flow(cfg: TrainConfig, dim: int, cond_dim: int, generator) -> CouplingFlow:
    return CouplingFlow(
        dim,
        cond_dim,
        n_blocks=cfg.flow_blocks,
        hidden=cfg.flow_hidden,
        clamp=3.0,
        generator=generator,
    )


def train_ralpha(cfg: TrainConfig, sites: SiteSet, prior: PriorSpec):
    """Train the covariate-scale estimator.

    Returns (estimator, log_rows); log rows carry wall-clock times and belong
    in the training-log CSV, not in the checkpoint.
    """
    variant = VARIANTS[cfg.variant]
    covmodel = COVARIATE_MODELS[cfg.covmodel]
    if sites.n_sites != cfg.d:
        raise ConfigError(f"site set has {sites.n_sites} sites, config says {cfg.d}")
    hyper_names = hyper_column_names(variant)
    hyper_loc, hyper_scale = _hyper_moments(prior, hyper_names)
    gen = torch.Generator().manual_seed(cfg.seed)
    net = RAlphaNet(cfg.d, hyper_names, hyper_loc, hyper_scale, cfg.n_lstm, cfg.n_dense, gen)
    transform = SupportTransform.from_prior(prior, _gamma_names(covmodel))
    flow = _build_flow(cfg, covmodel.n_gamma, cfg.n_dense, gen)

    def make_example(rng):
        theta = sample_prior(prior, variant, covmodel, rng)
        panel = simulate_panel(sites, covmodel, variant, theta, cfg.n, rng)
        censored = censor(panel, empirical_threshold(panel, cfg.censor_level))
        theta_x = {name: getattr(theta, name) for name in hyper_names}
        return assemble_ralpha_input(censored, theta_x, variant), theta.gamma

    log_rows = fit_amortized(cfg, net, flow, transform, make_example, _PHASE_RALPHA)
    estimator = TrainedEstimator(
        kind="ralpha",
        net=net,
        flow=flow,
        transform=transform,
        variant_name=variant.name,
        covmodel_name=covmodel.name,
        sites=sites,
        prior=prior,
        seed=cfg.seed,
        train_config=cfg.to_dict(),
        training_log=[
            {k: row[k] for k in ("batch_index", "train_loss", "heldout_loss")}
            for row in log_rows
        ],
    )
    return estimator, log_rows


def train_rx(cfg: TrainConfig, sites: SiteSet, prior: PriorSpec):
    """Train the latent-factor estimator.

    The covariate-scale block is never sampled here: the factor panel does
    not depend on it.  Targets are the latent block in canonical order.
    """
    variant = VARIANTS[cfg.variant]
    covmodel = COVARIATE_MODELS[cfg.covmodel]
    if sites.n_sites != cfg.d:
        raise ConfigError(f"site set has {sites.n_sites} sites, config says {cfg.d}")
    target_names = theta_x_names(variant)
    if not target_names:
        raise ConfigError(f"variant {variant.name} has no latent-factor parameters")
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    net = RXNet(cfg.d1, cfg.d2, cfg.n_lstm, cfg.n_dense, gen)
    transform = SupportTransform.from_prior(prior, target_names)
    flow = _build_flow(cfg, len(target_names), cfg.n_dense, gen)

    def make_example(rng):
        values = _sample_theta_x(prior, variant, rng)
        theta = ParameterVector(gamma=np.zeros(1), **values)
        panel = simulate_factor_panel(sites, variant, theta, cfg.n, rng)
        censored = censor(panel, empirical_threshold(panel, cfg.censor_level))
        grid = assemble_rx_input(censored.values, cfg.d1, cfg.d2)
        return grid, np.array([values[name] for name in target_names])

    log_rows = fit_amortized(cfg, net, flow, transform, make_example, _PHASE_RX)
    estimator = TrainedEstimator(
        kind="rx",
        net=net,
        flow=flow,
        transform=transform,
        variant_name=variant.name,
        covmodel_name=covmodel.name,
        sites=sites,
        prior=prior,
        seed=cfg.seed,
        train_config=cfg.to_dict(),
        training_log=[
            {k: row[k] for k in ("batch_index", "train_loss", "heldout_loss")}
            for row in log_rows
        ],
    )
    return estimator, log_rows


def validate_recovery(
    est_alpha: TrainedEstimator,
    est_x: TrainedEstimator,
    n_recoveries: int,
    n_iter: int = 1000,
    burn_in: int = 200,
    n_draws_per_chain: int | None = None,
    n_obs: int | None = None,
    seed: int = 0,
    posterior_sampler=None,
):
    """Recovery study: simulate at known truths, sample the posterior, and
    score per-parameter accuracy.

    Returns a dict with per-parameter R-squared, per-recovery posterior
    means/truths, and per-recovery credible-interval coverage indicators.
    ``posterior_sampler`` overrides the default Gibbs chain (used by tests
    to check the metric plumbing against a perfect-estimator stub).
    """
    from .gibbs import gibbs_run, initialize
    from .metrics import credible_interval, r_squared

    variant = VARIANTS[est_alpha.variant_name]
    covmodel = COVARIATE_MODELS[est_alpha.covmodel_name]
    sites = est_alpha.sites
    prior = est_alpha.prior
    cfg = est_alpha.train_config
    n = n_obs or cfg.get("n", 100)
    censor_level = cfg.get("censor_level", 0.75)
    names = list(est_alpha.target_names) + list(est_x.target_names)

    truths, means, covered = [], [], []
    for r in range(n_recoveries):
        rng = substream(seed, 5, r)
        truth = sample_prior(prior, variant, covmodel, rng)
        panel = simulate_panel(sites, covmodel, variant, truth, n, rng)
        censored = censor(panel, empirical_threshold(panel, censor_level))
        truth_dict = truth.as_dict()
        truths.append([truth_dict[name] for name in names])
        if posterior_sampler is not None:
            draws = posterior_sampler(truth, censored, rng)
        else:
            init = initialize(prior, variant, rng)
            chain = gibbs_run(est_alpha, est_x, censored, init, n_iter, rng)
            draws = chain.draws_for(names)[burn_in:]
        means.append(draws.mean(axis=0))
        covered.append(
            [
                credible_interval(draws[:, j])[0]
                <= truths[-1][j]
                <= credible_interval(draws[:, j])[1]
                for j in range(len(names))
            ]
        )

    truths_arr = np.asarray(truths)
    means_arr = np.asarray(means)
    r2 = {
        name: r_squared(means_arr[:, j], truths_arr[:, j]) for j, name in enumerate(names)
    }
    return {
        "param_names": names,
        "r_squared": r2,
        "truths": truths_arr,
        "posterior_means": means_arr,
        "ci_covered": np.asarray(covered, dtype=bool),
    }
