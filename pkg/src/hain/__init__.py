"""Hierarchical attention network for interpretable classification of
high-dimensional tabular data."""

__version__ = "0.1.0"
