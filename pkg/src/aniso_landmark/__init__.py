"""Uncertainty-aware landmark detection with Cholesky-parameterised anisotropic heatmaps."""

__version__ = "0.1.0"
