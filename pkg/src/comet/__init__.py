"""Continual cross-modal representation learning over a shared, expanding codebook."""

__version__ = "0.1.0"
