"""Retrieval-augmented in-context forecasting with a 3D attention model."""

__version__ = "0.1.0"
