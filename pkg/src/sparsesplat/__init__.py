"""Differentiable 2D Gaussian splatting for sparse-view surface reconstruction."""
__version__ = "0.1.0"
