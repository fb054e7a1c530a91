"""Two-block Gibbs scan over the amortized conditional posteriors.

Each iteration draws the covariate-scale block given the data and the
current latent-factor parameters, recomputes the latent ratios under the new
scale, and draws the latent-factor block given those ratios.  One latent
normal vector feeds each conditional per iteration.  The kernel is an
approximate Gibbs sampler: its conditionals are trained amortized
approximations, not exact conditionals.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .estimator import TrainedEstimator
from .model import (
    COVARIATE_MODELS,
    VARIANTS,
    CensoredPanel,
    ParameterVector,
    PriorSpec,
    alpha,
    full_param_names,
    latent_ratio,
    theta_x_names,
)
from .summaries import assemble_ralpha_input, assemble_rx_input, summarize

__all__ = ["PosteriorChain", "initialize", "gibbs_run"]


@dataclass
class PosteriorChain:
    """Ordered posterior draws with run metadata."""

    param_names: tuple
    draws: np.ndarray  # (n_iter, n_params)
    wall_minutes: float
    seed: int | None
    chain_id: int
    variant_name: str
    covmodel_name: str
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.param_names.index(name)]

    def draws_for(self, names) -> np.ndarray:
        idx = [self.param_names.index(name) for name in names]
        return self.draws[:, idx]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write("iteration," + ",".join(self.param_names) + "\n")
            for i, row in enumerate(self.draws):
                cells = ",".join(repr(float(v)) for v in row)
                handle.write(f"{i},{cells}\n")

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "runtime_minutes": self.wall_minutes,
            "chain_id": self.chain_id,
            "variant": self.variant_name,
            "covmodel": self.covmodel_name,
            "n_iterations": int(self.draws.shape[0]),
            **self.extra,
        }


def initialize(prior: PriorSpec, variant, rng: np.random.Generator) -> dict:
    """Prior draw of the latent-factor block (overdispersed chain starts)."""
    variant = VARIANTS[variant] if isinstance(variant, str) else variant
    values = {}
    for name in theta_x_names(variant):
        draw = float(prior.dist_for(name).sample(rng))
        if name == "rho":
            while draw <= 0.0:
                draw = float(prior.dist_for(name).sample(rng))
        values[name] = draw
    return values


def _check_compatible(est_alpha: TrainedEstimator, est_x: TrainedEstimator,
                      censored: CensoredPanel):
    if est_alpha.kind != "ralpha" or est_x.kind != "rx":
        raise ConfigError("estimators passed in the wrong order (expect ralpha, rx)")
    if est_alpha.variant_name != est_x.variant_name:
        raise ConfigError(
            f"variant mismatch between checkpoints: "
            f"{est_alpha.variant_name} vs {est_x.variant_name}"
        )
    if est_alpha.covmodel_name != est_x.covmodel_name:
        raise ConfigError("covariate-model mismatch between checkpoints")
    d = censored.n_sites
    if est_alpha.sites.n_sites != d:
        raise ConfigError(
            f"data has {d} sites but the checkpoint was trained on "
            f"{est_alpha.sites.n_sites}"
        )
    rx_cfg = est_x.net.config()
    if rx_cfg["d1"] * rx_cfg["d2"] != d:
        raise ConfigError("latent-factor grid does not tile the data's site count")


def gibbs_run(
    est_alpha: TrainedEstimator,
    est_x: TrainedEstimator,
    censored: CensoredPanel,
    init: dict,
    n_iter: int,
    rng: np.random.Generator,
    chain_id: int = 0,
    seed: int | None = None,
) -> PosteriorChain:
    """Alternate amortized conditional draws for ``n_iter`` scans.

    ``init`` holds starting values for the latent-factor block.  Draws lie
    inside the prior supports by construction of the support transform.
    """
    _check_compatible(est_alpha, est_x, censored)
    variant = VARIANTS[est_alpha.variant_name]
    covmodel = COVARIATE_MODELS[est_alpha.covmodel_name]
    x_names = list(est_x.target_names)
    hyper_names = [name for name in est_alpha.net.hyper_names]
    missing = [name for name in x_names if name not in init]
    if missing:
        raise ConfigError(f"initial latent-factor values missing {missing}")
    rx_cfg = est_x.net.config()
    d1, d2 = rx_cfg["d1"], rx_cfg["d2"]
    # draws are produced block-wise but stored in canonical column order
    names = full_param_names(variant, covmodel)
    draw_order = list(est_alpha.target_names) + x_names
    reorder = [draw_order.index(name) for name in names]

    theta_x = {name: float(init[name]) for name in x_names}
    draws = np.empty((n_iter, len(names)))
    tic = time.perf_counter()
    for i in range(n_iter):
        ralpha_input = assemble_ralpha_input(
            censored, {name: theta_x[name] for name in hyper_names}, variant
        )
        cond_alpha = summarize(est_alpha.net, ralpha_input)
        gamma = est_alpha.draw_posterior(cond_alpha, 1, rng)[0]

        theta_scale = ParameterVector(gamma=gamma)
        scale = alpha(est_alpha.sites, covmodel, theta_scale)
        ratio = latent_ratio(censored, scale)

        cond_x = summarize(est_x.net, assemble_rx_input(ratio, d1, d2))
        x_draw = est_x.draw_posterior(cond_x, 1, rng)[0]
        theta_x = {name: float(value) for name, value in zip(x_names, x_draw)}

        draws[i] = np.concatenate([gamma, x_draw])[reorder]
    wall_minutes = (time.perf_counter() - tic) / 60.0

    return PosteriorChain(
        param_names=names,
        draws=draws,
        wall_minutes=wall_minutes,
        seed=seed,
        chain_id=chain_id,
        variant_name=variant.name,
        covmodel_name=covmodel.name,
    )
