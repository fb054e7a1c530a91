import json

import numpy as np
import pytest

from amortex.errors import ConfigError
from amortex.gibbs import gibbs_run, initialize
from amortex.model import (
    COVARIATE_MODELS,
    VARIANTS,
    PriorSpec,
    censor,
    empirical_threshold,
    sample_prior,
    simulate_panel,
)
from amortex.rng import substream
from amortex.spatial import grid_sites
from conftest import untrained_pair


@pytest.fixture(scope="module")
def pair():
    return untrained_pair(perturb=0.05)


@pytest.fixture(scope="module")
def data(pair):
    est_a, _ = pair
    rng = substream(17, 0)
    truth = sample_prior(est_a.prior, VARIANTS["D4"], COVARIATE_MODELS["M1"], rng)
    panel = simulate_panel(est_a.sites, COVARIATE_MODELS["M1"], VARIANTS["D4"], truth, 30, rng)
    return censor(panel, empirical_threshold(panel, 0.75))


class TestInitialize:
    def test_draws_inside_support(self, pair):
        est_a, _ = pair
        rng = np.random.default_rng(0)
        for _ in range(100):
            init = initialize(est_a.prior, "D4", rng)
            assert -0.85 <= init["phi"] <= 0.85
            assert 0.05 <= init["sigma"] <= 3.0
            assert 2.0 <= init["beta3"] <= 15.0
            assert 0.0 < init["rho"] <= 2.0 * est_a.sites.delta

    def test_fixed_seed_reproducible(self, pair):
        est_a, _ = pair
        a = initialize(est_a.prior, "D4", np.random.default_rng(4))
        b = initialize(est_a.prior, "D4", np.random.default_rng(4))
        assert a == b

    def test_distinct_seeds_overdispersed(self, pair):
        est_a, _ = pair
        inits = [initialize(est_a.prior, "D4", np.random.default_rng(s)) for s in range(8)]
        phis = {round(i["phi"], 12) for i in inits}
        assert len(phis) == 8


class TestGibbsRun:
    def test_zero_iterations_empty_chain(self, pair, data):
        est_a, est_x = pair
        init = initialize(est_a.prior, "D4", np.random.default_rng(0))
        chain = gibbs_run(est_a, est_x, data, init, 0, np.random.default_rng(1), seed=1)
        assert len(chain) == 0
        meta = chain.metadata()
        assert meta["variant"] == "D4" and meta["n_iterations"] == 0

    def test_canonical_column_order(self, pair, data):
        est_a, est_x = pair
        init = initialize(est_a.prior, "D4", np.random.default_rng(0))
        chain = gibbs_run(est_a, est_x, data, init, 3, np.random.default_rng(1))
        assert chain.param_names == ("gamma0", "phi", "sigma", "beta3", "rho")

    def test_support_containment(self, pair, data):
        est_a, est_x = pair
        init = initialize(est_a.prior, "D4", np.random.default_rng(2))
        chain = gibbs_run(est_a, est_x, data, init, 100, np.random.default_rng(3))
        prior = est_a.prior
        for name in chain.param_names:
            lo, hi = prior.dist_for(name).support()
            column = chain.column(name)
            assert np.all(column >= lo) and np.all(column <= hi), name

    def test_bit_identical_given_seed(self, pair, data):
        est_a, est_x = pair
        init = initialize(est_a.prior, "D4", np.random.default_rng(5))
        a = gibbs_run(est_a, est_x, data, init, 25, np.random.default_rng(6))
        b = gibbs_run(est_a, est_x, data, init, 25, np.random.default_rng(6))
        assert np.array_equal(a.draws, b.draws)

    def test_distinct_seeds_differ(self, pair, data):
        est_a, est_x = pair
        init = initialize(est_a.prior, "D4", np.random.default_rng(5))
        a = gibbs_run(est_a, est_x, data, init, 10, np.random.default_rng(6))
        b = gibbs_run(est_a, est_x, data, init, 10, np.random.default_rng(7))
        assert not np.array_equal(a.draws, b.draws)

    def test_estimator_order_checked(self, pair, data):
        est_a, est_x = pair
        with pytest.raises(ConfigError):
            gibbs_run(est_x, est_a, data, {}, 1, np.random.default_rng(0))

    def test_variant_mismatch_checked(self, data):
        est_a, _ = untrained_pair(variant="D4")
        _, est_x_other = untrained_pair(variant="D3")
        with pytest.raises(ConfigError):
            gibbs_run(est_a, est_x_other, data, {}, 1, np.random.default_rng(0))

    def test_geometry_mismatch_checked(self, pair):
        est_a, est_x = pair
        rng = substream(3, 1)
        sites9 = grid_sites(3, 3, extra_covariates=1, rng=rng)
        prior = PriorSpec.default(sites9)
        truth = sample_prior(prior, VARIANTS["D4"], COVARIATE_MODELS["M1"], rng)
        panel = simulate_panel(sites9, COVARIATE_MODELS["M1"], VARIANTS["D4"], truth, 20, rng)
        censored = censor(panel, empirical_threshold(panel, 0.75))
        init = initialize(prior, "D4", rng)
        with pytest.raises(ConfigError):
            gibbs_run(est_a, est_x, censored, init, 1, np.random.default_rng(0))

    def test_missing_init_value(self, pair, data):
        est_a, est_x = pair
        with pytest.raises(ConfigError):
            gibbs_run(est_a, est_x, data, {"phi": 0.1}, 1, np.random.default_rng(0))


class TestChainSerialization:
    def test_csv_round_trip_exact(self, pair, data, tmp_path):
        est_a, est_x = pair
        init = initialize(est_a.prior, "D4", np.random.default_rng(8))
        chain = gibbs_run(est_a, est_x, data, init, 12, np.random.default_rng(9), seed=9)
        path = tmp_path / "chain.csv"
        chain.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration," + ",".join(chain.param_names)
        parsed = np.array(
            [[float(cell) for cell in line.split(",")[1:]] for line in lines[1:]]
        )
        assert np.array_equal(parsed, chain.draws)

    def test_metadata_fields(self, pair, data):
        est_a, est_x = pair
        init = initialize(est_a.prior, "D4", np.random.default_rng(8))
        chain = gibbs_run(est_a, est_x, data, init, 2, np.random.default_rng(9),
                          chain_id=3, seed=123)
        meta = chain.metadata()
        assert meta["seed"] == 123
        assert meta["chain_id"] == 3
        assert meta["runtime_minutes"] > 0
        assert json.dumps(meta)  # JSON-serializable
