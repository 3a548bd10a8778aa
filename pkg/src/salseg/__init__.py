"""Metric-embedding salient object segmentation on synthetic data, with a
Jacobian/Lipschitz robustness toolkit."""

__version__ = "0.1.0"
