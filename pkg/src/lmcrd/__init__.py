"""Reconstruction-error augmented multi-view contrastive learning for medical time series."""

__version__ = "0.1.0"
