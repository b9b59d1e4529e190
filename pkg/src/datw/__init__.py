"""Learned attention-based warping distances for time series, with DTW baselines."""

__version__ = "0.1.0"
