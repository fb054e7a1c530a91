import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amortex.errors import ConfigError
from amortex.model import (
    COVARIATE_MODELS,
    VARIANTS,
    CensoredPanel,
    ParameterVector,
    PriorSpec,
    alpha,
    censor,
    empirical_threshold,
    full_param_names,
    hyper_column_names,
    latent_ratio,
    sample_prior,
    sample_x1,
    sample_x2_ar,
    sample_x2_iid,
    simulate_factor_panel,
    simulate_panel,
    theta_x_names,
    uniform,
)
from amortex.spatial import grid_sites


@pytest.fixture(scope="module")
def sites():
    return grid_sites(3, 3, extra_covariates=1, rng=np.random.default_rng(99))


def theta_for(variant_name, gamma=(0.0,), **overrides):
    defaults = dict(beta1=1.0, phi=0.5, sigma=0.5, beta2=1.0, beta3=5.0, rho=0.5)
    variant = VARIANTS[variant_name]
    values = {}
    from amortex.model import required_fields

    for name in required_fields(variant):
        values[name] = overrides.get(name, defaults[name])
    return ParameterVector(gamma=np.asarray(gamma, dtype=float), **values)


class TestCatalogs:
    def test_nine_variants(self):
        assert set(VARIANTS) == {f"D{i}" for i in range(1, 9)} | {"DY"}
        assert all(v.ar != "absent" or v.name == "DY" for v in VARIANTS.values())

    def test_covariate_models_nest(self):
        for k in range(2, 8):
            smaller = COVARIATE_MODELS[f"M{k - 1}"].terms
            larger = COVARIATE_MODELS[f"M{k}"].terms
            assert larger[: len(smaller)] == smaller
        assert COVARIATE_MODELS["M1"].terms == ()

    def test_param_name_blocks(self):
        d4 = VARIANTS["D4"]
        assert theta_x_names(d4) == ("phi", "sigma", "beta3", "rho")
        assert hyper_column_names(d4) == ("phi", "sigma", "beta3", "rho")
        d8 = VARIANTS["D8"]
        assert theta_x_names(d8) == ("phi", "sigma", "beta3", "rho", "beta1")
        assert hyper_column_names(d8) == ("phi", "sigma", "beta3", "rho")
        dy = VARIANTS["DY"]
        assert theta_x_names(dy) == ("beta2", "beta3", "rho", "beta1")
        assert full_param_names(VARIANTS["D1"], COVARIATE_MODELS["M2"]) == (
            "gamma0",
            "gamma1",
            "phi",
            "sigma",
        )

    def test_validate_rejects_missing_and_extra(self):
        with pytest.raises(ConfigError):
            ParameterVector(gamma=[0.0]).validate_for(VARIANTS["D4"])
        with pytest.raises(ConfigError):
            theta_for("D4").with_values({"beta1": 1.0}).validate_for(VARIANTS["D4"])


class TestSamplePrior:
    def test_support_containment(self, sites):
        prior = PriorSpec.default(sites)
        rng = np.random.default_rng(0)
        for _ in range(200):
            theta = sample_prior(prior, VARIANTS["D4"], COVARIATE_MODELS["M3"], rng)
            assert 2.0 <= theta.beta3 <= 15.0
            assert -0.85 <= theta.phi <= 0.85
            assert 0.05 <= theta.sigma <= 3.0
            assert 0.0 < theta.rho <= 2.0 * sites.delta
            assert theta.beta1 is None and theta.beta2 is None
            assert theta.gamma.shape == (3,)

    def test_range_upper_bound_tracks_geometry(self, sites):
        prior = PriorSpec.default(sites)
        assert prior.rho.b == pytest.approx(2.0 * sites.delta)

    def test_ar_coefficient_mean(self, sites):
        prior = PriorSpec.default(sites)
        rng = np.random.default_rng(1)
        draws = np.array(
            [
                sample_prior(prior, VARIANTS["D1"], COVARIATE_MODELS["M1"], rng).phi
                for _ in range(10**5)
            ]
        )
        se = prior.phi.sd / math.sqrt(draws.size)
        assert abs(draws.mean()) < 4 * se


class TestAlpha:
    def test_zero_coefficients(self, sites):
        theta = theta_for("D4", gamma=[0.0, 0.0, 0.0])
        assert np.allclose(alpha(sites, COVARIATE_MODELS["M3"], theta), 1.0)

    def test_intercept_only(self, sites):
        theta = theta_for("D1", gamma=[1.0])
        assert np.allclose(alpha(sites, COVARIATE_MODELS["M1"], theta), math.e)

    def test_simulation_study_setting(self):
        # gamma0 = e, unit slopes, covariates (0.5, 0.5, 0)
        from amortex.spatial import SiteSet

        one = SiteSet.from_coords(["a"], [[0.5, 0.5]], [[0.5, 0.5, 0.0]])
        theta = theta_for("D4", gamma=[math.e, 1.0, 1.0, 1.0])
        value = alpha(one, COVARIATE_MODELS["M4"], theta)
        assert value[0] == pytest.approx(math.exp(math.e + 1.0), rel=1e-12)

    def test_squared_terms(self, sites):
        theta = theta_for("D4", gamma=[0.0, 0.0, 0.0, 0.0, 2.0])
        value = alpha(sites, COVARIATE_MODELS["M5"], theta)
        expected = np.exp(2.0 * sites.covariates[:, 0] ** 2)
        assert np.allclose(value, expected)

    def test_length_mismatch(self, sites):
        with pytest.raises(ConfigError):
            alpha(sites, COVARIATE_MODELS["M3"], theta_for("D4", gamma=[0.0]))


class TestFactorSamplers:
    def test_x1_unit_exponent_is_exponential(self):
        draws = sample_x1(1.0, 10**5, 1, False, np.random.default_rng(0))
        assert abs(draws.mean() - 1.0) < 4 / math.sqrt(draws.size)
        assert abs(draws.var() - 1.0) < 0.05

    def test_x1_normalization_half_exponent(self):
        # E[E^0.5] = Gamma(1.5), so the normalized mean is exactly one
        n = 10**5
        draws = sample_x1(0.5, n, 1, False, np.random.default_rng(1))
        var = math.gamma(2.0) / math.gamma(1.5) ** 2 - 1.0
        assert abs(draws.mean() - 1.0) < 4 * math.sqrt(var / n)

    def test_x1_constant_rows(self):
        draws = sample_x1(1.0, 50, 7, True, np.random.default_rng(2))
        assert np.all(draws == draws[:, [0]])

    def test_x2_ar_degenerate_sigma(self):
        draws = sample_x2_ar(0.7, 1e-12, 100, 3, False, np.random.default_rng(3))
        assert np.allclose(draws, 1.0, atol=1e-5)

    def test_x2_ar_stationary_moments(self):
        # tau and the stationary log-variance are forced by the unit-mean identity
        phi, sigma = 0.7, 1.0
        draws = sample_x2_ar(phi, sigma, 2 * 10**5, 1, True, np.random.default_rng(4))
        log_x = np.log(draws[:, 0])
        tau = -(sigma**2) / (2 * (1 - phi**2))
        assert tau == pytest.approx(-0.9803921568627451)
        stat_var = sigma**2 / (1 - phi**2)
        assert stat_var == pytest.approx(1.9607843137254901)
        assert abs(log_x.mean() - tau) < 0.05
        assert abs(log_x.var() - stat_var) < 0.08

    def test_x2_ar_lag_one_autocorrelation(self):
        phi = 0.7
        draws = sample_x2_ar(phi, 1.0, 10**5, 1, True, np.random.default_rng(5))
        log_x = np.log(draws[:, 0])
        centered = log_x - log_x.mean()
        rho1 = (centered[1:] @ centered[:-1]) / (centered @ centered)
        assert abs(rho1 - phi) < 0.02

    def test_x2_ar_varying_chains_independent(self):
        draws = sample_x2_ar(0.5, 1.0, 2 * 10**4, 2, False, np.random.default_rng(6))
        log_x = np.log(draws)
        corr = np.corrcoef(log_x.T)[0, 1]
        assert abs(corr) < 0.05

    def test_x2_iid_exponent_two_mean(self):
        n = 10**5
        draws = sample_x2_iid(2.0, n, np.random.default_rng(7))
        # E[E^2] = Gamma(3) = 2, normalized out; fourth moment gives the se
        var = math.gamma(5.0) / math.gamma(3.0) ** 2 - 1.0
        assert abs(draws.mean() - 1.0) < 4 * math.sqrt(var / n)

    def test_x2_iid_is_exponential_at_unit_exponent(self):
        draws = sample_x2_iid(1.0, 10**5, np.random.default_rng(8))
        assert abs(draws.mean() - 1.0) < 0.02
        assert abs(np.quantile(draws, 0.5) - math.log(2.0)) < 0.02


class TestSimulatePanel:
    def test_d1_degenerate_equals_scale(self, sites):
        theta = theta_for("D1", gamma=[0.3], sigma=1e-12)
        panel = simulate_panel(sites, COVARIATE_MODELS["M1"], VARIANTS["D1"], theta, 20,
                               np.random.default_rng(0))
        assert np.allclose(panel, math.exp(0.3), atol=1e-5)

    def test_x3_only_mean_matches_scale(self, sites):
        theta = ParameterVector(gamma=[0.2, 0.4], beta3=5.0, rho=0.5, phi=0.3, sigma=1e-9)
        n = 10**5
        panel = simulate_panel(sites, COVARIATE_MODELS["M2"], VARIANTS["D4"], theta, n,
                               np.random.default_rng(1))
        scale = alpha(sites, COVARIATE_MODELS["M2"], theta)
        se = scale * math.sqrt((1.0 / 3.0) / n)
        assert np.all(np.abs(panel.mean(axis=0) - scale) < 4 * se)

    def test_constant_factors_share_columns(self, sites):
        theta = theta_for("D7")
        panel = simulate_factor_panel(sites, VARIANTS["D7"], theta, 30,
                                      np.random.default_rng(2))
        # X1 and X2 are site-shared; X3 varies, so divide it out via ranks:
        # identical X1*X2 per row means column ratios equal X3 ratios (not
        # testable directly), so instead check the site-shared variants alone.
        x1 = sample_x1(theta.beta1, 30, sites.n_sites, True, np.random.default_rng(3))
        assert np.all(x1 == x1[:, [0]])

    def test_d1_rows_constant_across_sites(self, sites):
        theta = theta_for("D1", gamma=[0.0])
        panel = simulate_panel(sites, COVARIATE_MODELS["M1"], VARIANTS["D1"], theta, 25,
                               np.random.default_rng(4))
        assert np.all(panel == panel[:, [0]])

    def test_missing_parameter_raises(self, sites):
        with pytest.raises(ConfigError):
            simulate_panel(
                sites,
                COVARIATE_MODELS["M1"],
                VARIANTS["D4"],
                ParameterVector(gamma=[0.0]),
                10,
                np.random.default_rng(5),
            )

    def test_deterministic_given_seed(self, sites):
        theta = theta_for("D5", gamma=[0.1])
        a = simulate_panel(sites, COVARIATE_MODELS["M1"], VARIANTS["D5"], theta, 15,
                           np.random.default_rng(42))
        b = simulate_panel(sites, COVARIATE_MODELS["M1"], VARIANTS["D5"], theta, 15,
                           np.random.default_rng(42))
        assert np.array_equal(a, b)

    def test_dy_variant_runs(self, sites):
        theta = theta_for("DY", gamma=[0.0])
        panel = simulate_panel(sites, COVARIATE_MODELS["M1"], VARIANTS["DY"], theta, 40,
                               np.random.default_rng(6))
        assert panel.shape == (40, sites.n_sites)
        assert np.all(panel > 0)


class TestCensoring:
    def test_thresholds_below_all_data(self):
        panel = np.array([[1.0, 2.0], [3.0, 4.0]])
        result = censor(panel, np.array([-10.0, -10.0]))
        assert np.array_equal(result.values, panel)
        assert not result.censor_mask.any()

    def test_p75_column_example(self):
        column = np.array([[1.0], [2.0], [3.0], [4.0]])
        u = empirical_threshold(column, 0.75)
        assert u[0] == pytest.approx(3.25)
        result = censor(column, u)
        assert np.allclose(result.values.ravel(), [3.25, 3.25, 3.25, 4.0])
        assert list(result.censor_mask.ravel()) == [True, True, True, False]

    def test_all_below_threshold(self):
        panel = np.ones((5, 1))
        result = censor(panel, np.array([7.0]))
        assert np.all(result.values == 7.0)
        assert result.censor_mask.all()

    def test_constant_column_quantile(self):
        panel = np.full((10, 2), 3.5)
        assert np.allclose(empirical_threshold(panel, 0.75), 3.5)

    def test_mostly_zero_column_has_positive_p75(self):
        rng = np.random.default_rng(0)
        column = np.where(rng.uniform(size=1000) < 0.55, 0.0, rng.exponential(5.0, 1000))
        u = empirical_threshold(column[:, None], 0.75)
        assert u[0] > 0

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_censoring_idempotent(self, seed):
        rng = np.random.default_rng(seed)
        panel = rng.exponential(1.0, size=(20, 3))
        u = empirical_threshold(panel, 0.75)
        once = censor(panel, u)
        twice = censor(once.values, u)
        assert np.array_equal(once.values, twice.values)

    def test_mask_iff_at_threshold(self):
        rng = np.random.default_rng(1)
        panel = rng.exponential(1.0, size=(50, 4))
        u = empirical_threshold(panel, 0.75)
        result = censor(panel, u)
        assert np.array_equal(result.censor_mask, result.values == u[None, :])
        assert np.all(result.values >= u[None, :])


class TestLatentRatio:
    def test_unit_scale_identity(self):
        panel = CensoredPanel(np.array([[2.0, 3.0]]), np.array([0.0, 0.0]),
                              np.zeros((1, 2), dtype=bool))
        assert np.array_equal(latent_ratio(panel, np.ones(2)), panel.values)

    def test_elementwise_division(self):
        panel = CensoredPanel(np.array([[2.0, 4.0]]), np.array([0.0, 0.0]),
                              np.zeros((1, 2), dtype=bool))
        assert np.allclose(latent_ratio(panel, np.array([2.0, 4.0])), 1.0)

    def test_rejects_nonpositive_scale(self):
        panel = CensoredPanel(np.ones((1, 1)), np.zeros(1), np.zeros((1, 1), dtype=bool))
        with pytest.raises(ValueError):
            latent_ratio(panel, np.array([0.0]))


class TestPriorSpecRoundTrip:
    def test_dict_round_trip(self, sites):
        prior = PriorSpec.default(sites)
        again = PriorSpec.from_dict(prior.to_dict())
        assert again == prior

    def test_uniform_validation(self):
        with pytest.raises(ConfigError):
            uniform(1.0, 1.0)
