"""Conditional diffusion forecasting of battery capacity from fleet charging logs."""

__version__ = "0.1.0"
