"""Momentum-contrast patch embeddings and grouped patient-level classification."""

__version__ = "0.1.0"
