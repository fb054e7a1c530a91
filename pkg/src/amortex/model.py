"""Multiplicative generative model: covariate scale times unit-mean factors.

A panel draw multiplies a per-site log-linear scale by any of three factors:
spatial white noise with a Weibull-type tail, a temporal log-normal AR(1)
factor, and a Gaussian-copula field with inverse-gamma margins.  Each factor
has mean exactly one, so the scale alone carries the marginal level.  Variants
toggle which factors enter and whether the first two are shared across sites;
left-censoring at per-site thresholds produces the observed panel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError
from .spatial import CorrelationModel, IgMargin, SiteSet, sample_x3

__all__ = [
    "ParameterVector",
    "FactorVariant",
    "CovariateModel",
    "Dist",
    "PriorSpec",
    "CensoredPanel",
    "VARIANTS",
    "COVARIATE_MODELS",
    "sample_prior",
    "alpha",
    "sample_x1",
    "sample_x2_ar",
    "sample_x2_iid",
    "simulate_panel",
    "simulate_factor_panel",
    "censor",
    "empirical_threshold",
    "latent_ratio",
    "theta_x_names",
    "hyper_column_names",
    "full_param_names",
]

_NOISE_STATES = ("absent", "varying", "constant")
_AR_STATES = ("absent", "varying", "constant")


@dataclass(frozen=True)
class FactorVariant:
    """Which factors enter the product and whether each is site-shared."""

    name: str
    noise: str = "absent"
    ar: str = "absent"
    x3: bool = False
    legacy_x2_iid: bool = False

    def __post_init__(self):
        if self.noise not in _NOISE_STATES or self.ar not in _AR_STATES:
            raise ConfigError(f"unknown factor state in variant {self.name!r}")
        if self.ar == "absent" and not self.legacy_x2_iid:
            raise ConfigError(
                f"variant {self.name!r}: only the legacy iid-factor variant may drop the AR factor"
            )
        if self.legacy_x2_iid and self.ar != "absent":
            raise ConfigError(f"variant {self.name!r}: iid and AR temporal factors are exclusive")


VARIANTS: dict[str, FactorVariant] = {
    "D1": FactorVariant("D1", noise="absent", ar="constant", x3=False),
    "D2": FactorVariant("D2", noise="absent", ar="varying", x3=False),
    "D3": FactorVariant("D3", noise="absent", ar="constant", x3=True),
    "D4": FactorVariant("D4", noise="absent", ar="varying", x3=True),
    "D5": FactorVariant("D5", noise="varying", ar="varying", x3=True),
    "D6": FactorVariant("D6", noise="varying", ar="constant", x3=True),
    "D7": FactorVariant("D7", noise="constant", ar="constant", x3=True),
    "D8": FactorVariant("D8", noise="constant", ar="varying", x3=True),
    "DY": FactorVariant("DY", noise="varying", ar="absent", x3=True, legacy_x2_iid=True),
}


@dataclass(frozen=True)
class CovariateModel:
    """Ordered covariate terms of the log-linear scale.

    Each term is (column index, squared?); the intercept is implicit.
    """

    name: str
    terms: tuple = ()

    @property
    def n_gamma(self) -> int:
        return 1 + len(self.terms)


COVARIATE_MODELS: dict[str, CovariateModel] = {
    "M1": CovariateModel("M1", ()),
    "M2": CovariateModel("M2", ((0, False),)),
    "M3": CovariateModel("M3", ((0, False), (1, False))),
    "M4": CovariateModel("M4", ((0, False), (1, False), (2, False))),
    "M5": CovariateModel("M5", ((0, False), (1, False), (2, False), (0, True))),
    "M6": CovariateModel("M6", ((0, False), (1, False), (2, False), (0, True), (1, True))),
    "M7": CovariateModel(
        "M7", ((0, False), (1, False), (2, False), (0, True), (1, True), (2, True))
    ),
}


@dataclass(frozen=True)
class ParameterVector:
    """Hyperparameters of the product model; optional fields are present
    exactly when the paired variant requires them."""

    gamma: np.ndarray
    beta1: float | None = None
    phi: float | None = None
    sigma: float | None = None
    beta2: float | None = None
    beta3: float | None = None
    rho: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))

    def validate_for(self, variant: FactorVariant, covmodel: CovariateModel | None = None):
        required = required_fields(variant)
        for name in required:
            if getattr(self, name) is None:
                raise ConfigError(f"variant {variant.name} requires parameter {name!r}")
        for name in ("beta1", "phi", "sigma", "beta2", "beta3", "rho"):
            if name not in required and getattr(self, name) is not None:
                raise ConfigError(f"variant {variant.name} does not use parameter {name!r}")
        if covmodel is not None and self.gamma.shape[0] != covmodel.n_gamma:
            raise ConfigError(
                f"{covmodel.name} needs {covmodel.n_gamma} scale coefficients, "
                f"got {self.gamma.shape[0]}"
            )

    def as_dict(self) -> dict:
        out = {f"gamma{i}": float(g) for i, g in enumerate(self.gamma)}
        for name in ("beta1", "phi", "sigma", "beta2", "beta3", "rho"):
            value = getattr(self, name)
            if value is not None:
                out[name] = float(value)
        return out

    def with_values(self, values: dict) -> "ParameterVector":
        """Copy with named scalar fields replaced."""
        return replace(self, **values)


def required_fields(variant: FactorVariant) -> tuple:
    names = []
    if variant.noise != "absent":
        names.append("beta1")
    if variant.ar != "absent":
        names += ["phi", "sigma"]
    if variant.legacy_x2_iid:
        names.append("beta2")
    if variant.x3:
        names += ["beta3", "rho"]
    return tuple(names)


def theta_x_names(variant: FactorVariant) -> tuple:
    """Latent-factor block in flow-target order.

    The temporal and spatial blocks come first; the noise exponent is
    appended last for variants with a stochastic noise factor, since the
    joint latent posterior must still carry it.
    """
    names = []
    if variant.ar != "absent":
        names += ["phi", "sigma"]
    if variant.legacy_x2_iid:
        names.append("beta2")
    if variant.x3:
        names += ["beta3", "rho"]
    if variant.noise != "absent":
        names.append("beta1")
    return tuple(names)


def hyper_column_names(variant: FactorVariant) -> tuple:
    """Columns appended to the censored panel when summarizing for the scale
    block: the temporal factor parameters then the spatial ones."""
    names = []
    if variant.ar != "absent":
        names += ["phi", "sigma"]
    if variant.legacy_x2_iid:
        names.append("beta2")
    if variant.x3:
        names += ["beta3", "rho"]
    return tuple(names)


def full_param_names(variant: FactorVariant, covmodel: CovariateModel) -> tuple:
    """Canonical column order for chain output."""
    names = [f"gamma{i}" for i in range(covmodel.n_gamma)]
    if variant.noise != "absent":
        names.append("beta1")
    if variant.ar != "absent":
        names += ["phi", "sigma"]
    if variant.legacy_x2_iid:
        names.append("beta2")
    if variant.x3:
        names += ["beta3", "rho"]
    return tuple(names)


@dataclass(frozen=True)
class Dist:
    """Scalar prior: uniform(lo, hi) or normal(mean, sd)."""

    kind: str
    a: float
    b: float

    def __post_init__(self):
        if self.kind not in ("uniform", "normal"):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        if self.kind == "uniform" and not self.b > self.a:
            raise ConfigError("uniform prior needs hi > lo")
        if self.kind == "normal" and not self.b > 0:
            raise ConfigError("normal prior needs sd > 0")

    def sample(self, rng: np.random.Generator, size=None):
        if self.kind == "uniform":
            return rng.uniform(self.a, self.b, size=size)
        return rng.normal(self.a, self.b, size=size)

    @property
    def mean(self) -> float:
        return 0.5 * (self.a + self.b) if self.kind == "uniform" else self.a

    @property
    def sd(self) -> float:
        return (self.b - self.a) / math.sqrt(12.0) if self.kind == "uniform" else self.b

    def support(self) -> tuple:
        if self.kind == "uniform":
            return (self.a, self.b)
        return (-np.inf, np.inf)

    def contains(self, x: float) -> bool:
        lo, hi = self.support()
        return lo <= x <= hi


def uniform(lo: float, hi: float) -> Dist:
    return Dist("uniform", lo, hi)


def normal(mean: float, sd: float) -> Dist:
    return Dist("normal", mean, sd)


@dataclass(frozen=True)
class PriorSpec:
    """Weakly informative priors; the range upper bound scales with the
    site set's maximum intersite distance."""

    gamma: Dist = field(default_factory=lambda: normal(0.0, 2.0))
    beta1: Dist = field(default_factory=lambda: uniform(0.05, 2.0))
    phi: Dist = field(default_factory=lambda: uniform(-0.85, 0.85))
    sigma: Dist = field(default_factory=lambda: uniform(0.05, 3.0))
    beta2: Dist = field(default_factory=lambda: uniform(0.05, 2.0))
    beta3: Dist = field(default_factory=lambda: uniform(2.0, 15.0))
    rho: Dist = field(default_factory=lambda: uniform(0.0, 2.0))

    @classmethod
    def default(cls, sites: SiteSet) -> "PriorSpec":
        return cls(rho=uniform(0.0, 2.0 * sites.delta))

    def dist_for(self, name: str) -> Dist:
        base = name if not name.startswith("gamma") else "gamma"
        return getattr(self, base)

    def to_dict(self) -> dict:
        return {
            name: [d.kind, d.a, d.b]
            for name in ("gamma", "beta1", "phi", "sigma", "beta2", "beta3", "rho")
            for d in [getattr(self, name)]
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "PriorSpec":
        return cls(**{k: Dist(v[0], float(v[1]), float(v[2])) for k, v in payload.items()})


def sample_prior(
    prior: PriorSpec,
    variant: FactorVariant,
    covmodel: CovariateModel,
    rng: np.random.Generator,
) -> ParameterVector:
    """Independent prior draw of every field the variant requires.

    The range prior excludes an exact-zero draw (the correlation model needs
    a strictly positive range); the uniform(0, 2 delta) prior puts zero mass
    there anyway.
    """
    gamma = prior.gamma.sample(rng, size=covmodel.n_gamma)
    values: dict = {}
    for name in required_fields(variant):
        draw = float(prior.dist_for(name).sample(rng))
        if name == "rho":
            while draw <= 0.0:
                draw = float(prior.dist_for(name).sample(rng))
        values[name] = draw
    return ParameterVector(gamma=gamma, **values)


def alpha(sites: SiteSet, covmodel: CovariateModel, theta: ParameterVector) -> np.ndarray:
    """Per-site scale exp(gamma0 + sum_k gamma_k * term_k)."""
    gamma = theta.gamma
    if gamma.shape[0] != covmodel.n_gamma:
        raise ConfigError(
            f"{covmodel.name} needs {covmodel.n_gamma} scale coefficients, got {gamma.shape[0]}"
        )
    if not np.all(np.isfinite(sites.covariates)):
        raise ValueError("covariates must be finite")
    log_alpha = np.full(sites.n_sites, gamma[0])
    for coef, (col, squared) in zip(gamma[1:], covmodel.terms):
        column = sites.covariates[:, col]
        log_alpha = log_alpha + coef * (column**2 if squared else column)
    return np.exp(log_alpha)


def sample_x1(
    beta1: float, n: int, d: int, constant: bool, rng: np.random.Generator
) -> np.ndarray:
    """Weibull-type spatial white noise E**beta1 / Gamma(1 + beta1), unit mean."""
    if not beta1 > 0:
        raise ValueError("noise exponent must be positive")
    norm_const = math.gamma(1.0 + beta1)
    if constant:
        col = rng.standard_exponential(n) ** beta1 / norm_const
        return np.repeat(col[:, None], d, axis=1)
    return rng.standard_exponential((n, d)) ** beta1 / norm_const


def sample_x2_ar(
    phi: float, sigma: float, n: int, d: int, constant: bool, rng: np.random.Generator
) -> np.ndarray:
    """Log-normal AR(1) factor started in its stationary law.

    The log-process has mean tau = -sigma^2 / (2 (1 - phi^2)) and stationary
    variance sigma^2 / (1 - phi^2), which forces E[X2] = 1 exactly.  The
    spatially varying case runs d mutually independent chains.
    """
    if not abs(phi) < 1:
        raise ValueError("AR coefficient must lie in (-1, 1)")
    if not sigma > 0:
        raise ValueError("innovation sd must be positive")
    n_chains = 1 if constant else d
    stat_var = sigma**2 / (1.0 - phi**2)
    tau = -0.5 * stat_var
    log_x = np.empty((n, n_chains))
    log_x[0] = rng.normal(tau, math.sqrt(stat_var), size=n_chains)
    innovations = rng.normal(0.0, sigma, size=(n - 1, n_chains)) if n > 1 else None
    drift = (1.0 - phi) * tau
    for t in range(1, n):
        log_x[t] = drift + phi * log_x[t - 1] + innovations[t - 1]
    x = np.exp(log_x)
    if constant:
        return np.repeat(x, d, axis=1)
    return x


def sample_x2_iid(beta2: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Temporally iid site-shared factor E**beta2 / Gamma(1 + beta2)."""
    if not beta2 > 0:
        raise ValueError("exponent must be positive")
    return rng.standard_exponential(n) ** beta2 / math.gamma(1.0 + beta2)


def simulate_factor_panel(
    sites: SiteSet,
    variant: FactorVariant,
    theta: ParameterVector,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Product of the enabled unit-mean factors, without the covariate scale.

    The three factors use fixed independent substreams of ``rng`` so that,
    at a given seed, one factor's draws do not depend on which others are
    enabled.
    """
    theta.validate_for(variant)
    d = sites.n_sites
    rng_x1, rng_x2, rng_x3 = rng.spawn(3)
    panel = np.ones((n, d))
    if variant.noise != "absent":
        panel *= sample_x1(theta.beta1, n, d, variant.noise == "constant", rng_x1)
    if variant.ar != "absent":
        panel *= sample_x2_ar(theta.phi, theta.sigma, n, d, variant.ar == "constant", rng_x2)
    elif variant.legacy_x2_iid:
        panel *= sample_x2_iid(theta.beta2, n, rng_x2)[:, None]
    if variant.x3:
        panel *= sample_x3(
            sites, CorrelationModel(theta.rho), IgMargin(theta.beta3), n, rng_x3
        )
    return panel


def simulate_panel(
    sites: SiteSet,
    covmodel: CovariateModel,
    variant: FactorVariant,
    theta: ParameterVector,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """n x d panel: per-site scale times the enabled factors."""
    theta.validate_for(variant, covmodel)
    scale = alpha(sites, covmodel, theta)
    return scale[None, :] * simulate_factor_panel(sites, variant, theta, n, rng)


@dataclass(frozen=True)
class CensoredPanel:
    """Left-censored panel: values are max(y, threshold) with a mask of the
    censored cells."""

    values: np.ndarray
    thresholds: np.ndarray
    censor_mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        thresholds = np.asarray(self.thresholds, dtype=float)
        mask = np.asarray(self.censor_mask, dtype=bool)
        if values.ndim != 2 or thresholds.shape != (values.shape[1],):
            raise ValueError("values must be n x d with one threshold per column")
        if mask.shape != values.shape:
            raise ValueError("censor mask must match the value matrix")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "censor_mask", mask)

    @property
    def n_obs(self) -> int:
        return self.values.shape[0]

    @property
    def n_sites(self) -> int:
        return self.values.shape[1]


def censor(panel: np.ndarray, thresholds: np.ndarray) -> CensoredPanel:
    """Apply site thresholds: values become max(y, u_j), mask marks y <= u_j."""
    panel = np.asarray(panel, dtype=float)
    thresholds = np.asarray(thresholds, dtype=float)
    if not np.all(np.isfinite(thresholds)):
        raise ValueError("thresholds must be finite")
    values = np.maximum(panel, thresholds[None, :])
    mask = panel <= thresholds[None, :]
    return CensoredPanel(values, thresholds, mask)


def empirical_threshold(panel: np.ndarray, level: float) -> np.ndarray:
    """Per-column quantile by linear interpolation of order statistics."""
    if not 0.0 < level < 1.0:
        raise ValueError("censoring level must lie in (0, 1)")
    panel = np.asarray(panel, dtype=float)
    if panel.shape[0] < 2:
        raise ValueError("need at least two rows to take an empirical quantile")
    return np.quantile(panel, level, axis=0, method="linear")


def latent_ratio(censored: CensoredPanel, scale: np.ndarray) -> np.ndarray:
    """Censored values divided by the per-site scale."""
    scale = np.asarray(scale, dtype=float)
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise ValueError("scale must be strictly positive and finite")
    return censored.values / scale[None, :]
