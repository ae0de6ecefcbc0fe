"""Susceptibility estimation and training-data re-weighting for small transformers."""

__version__ = "0.1.0"
