"""Simulation and maximum-likelihood estimation for stochastic differential mixed-effects models."""

__version__ = "0.1.0"
