"""Uncertainty-aware Mean-Teacher consistency training for domain-adaptive segmentation."""

__version__ = "0.1.0"
