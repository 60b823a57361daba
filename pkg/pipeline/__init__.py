"""Numerical modules for sparse multivariate meta-analysis."""

__version__ = "0.1.0"
