import numpy as np
import torch

from amortex.estimator import TrainedEstimator
from amortex.flow import CouplingFlow, SupportTransform
from amortex.model import (
    COVARIATE_MODELS,
    VARIANTS,
    PriorSpec,
    hyper_column_names,
    theta_x_names,
)
from amortex.spatial import grid_sites
from amortex.summaries import RAlphaNet, RXNet, default_grid


def untrained_pair(variant="D4", covmodel="M1", d1=2, d2=2, n_lstm=8, n_dense=8, seed=0,
                   perturb=0.0):
    """Estimator pair with freshly initialized (identity) flows; cheap enough
    for plumbing tests that do not need calibrated posteriors."""
    var = VARIANTS[variant]
    cov = COVARIATE_MODELS[covmodel]
    sites = grid_sites(d1, d2, extra_covariates=1, rng=np.random.default_rng(seed))
    prior = PriorSpec.default(sites)
    gen = torch.Generator().manual_seed(seed)

    hyper = hyper_column_names(var)
    loc = np.array([prior.dist_for(name).mean for name in hyper])
    scale = np.array([prior.dist_for(name).sd for name in hyper])
    gamma_names = [f"gamma{i}" for i in range(cov.n_gamma)]
    net_a = RAlphaNet(sites.n_sites, hyper, loc, scale, n_lstm, n_dense, gen)
    flow_a = CouplingFlow(cov.n_gamma, n_dense, n_blocks=2, hidden=8, generator=gen)
    est_a = TrainedEstimator(
        kind="ralpha",
        net=net_a,
        flow=flow_a,
        transform=SupportTransform.from_prior(prior, gamma_names),
        variant_name=variant,
        covmodel_name=covmodel,
        sites=sites,
        prior=prior,
        seed=seed,
        train_config={"n": 30, "d": sites.n_sites, "censor_level": 0.75},
    )

    x_names = theta_x_names(var)
    g1, g2 = default_grid(sites.n_sites)
    net_x = RXNet(g1, g2, n_lstm, n_dense, gen)
    flow_x = CouplingFlow(len(x_names), n_dense, n_blocks=2, hidden=8, generator=gen)
    est_x = TrainedEstimator(
        kind="rx",
        net=net_x,
        flow=flow_x,
        transform=SupportTransform.from_prior(prior, x_names),
        variant_name=variant,
        covmodel_name=covmodel,
        sites=sites,
        prior=prior,
        seed=seed,
        train_config={"n": 30, "d": sites.n_sites, "censor_level": 0.75},
    )
    if perturb:
        with torch.no_grad():
            for module in (flow_a, flow_x):
                for p in module.parameters():
                    p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * perturb)
    return est_a, est_x
