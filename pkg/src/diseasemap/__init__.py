"""Spatio-temporal disease mapping with kriged environmental covariates."""

__version__ = "0.1.0"
