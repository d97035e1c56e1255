"""Simulation toolkit for Bayesian borrowing of source-trial information."""

__version__ = "0.1.0"
