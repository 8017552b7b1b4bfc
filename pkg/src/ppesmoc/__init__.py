"""Batch constrained multi-objective Bayesian optimization with PPESMOC."""

__version__ = "0.1.0"
