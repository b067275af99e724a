"""Koopman surrogates of gas pipelines for joint electricity-gas dispatch."""

__version__ = "0.1.0"
