"""Accuracy-gradient driven region-of-interest video encoding for analytics DNNs."""

__version__ = "0.1.0"
