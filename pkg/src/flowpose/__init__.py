"""Desk-scale temporal probabilistic pose and shape estimation."""

__version__ = "0.1.0"
