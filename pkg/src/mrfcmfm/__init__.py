"""Spatial Bayesian nonparametric clustering of income Lorenz curves."""

__version__ = "0.1.0"
