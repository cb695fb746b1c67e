"""Efficient unlearning with adapter layers, closed-form fusion and baselines."""

__version__ = "0.1.0"
