"""Differentiable RANSAC toolkit: samplers, minimal solvers, scoring and training."""

__version__ = "0.1.0"
