"""Perturbation-Optimization sampling of high-dimensional Gaussian fields."""

__version__ = "0.1.0"
