"""Numerical homogenization lab for interacting particle systems on Poisson configuration space."""

__version__ = "0.1.0"
