"""Grouped mixture-of-experts forecaster for daily cross-sectional returns."""

__version__ = "0.1.0"
