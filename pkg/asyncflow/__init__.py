"""Asynchronous flow-matching sampling with a Beta-policy timestep predictor."""

__version__ = "0.1.0"
