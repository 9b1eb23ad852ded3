"""Sparse-view 3D Gaussian splatting with multi-view consistency pruning."""

__version__ = "0.1.0"
