"""Numerical experiments in stochastic homogenization of convex integral functionals."""

__version__ = "0.1.0"
