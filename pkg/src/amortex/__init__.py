"""Bayesian spatio-temporal peaks-over-threshold modeling with amortized
flow-based Gibbs inference."""

__version__ = "0.1.0"
