"""Sparse-view cone-beam CT reconstruction with rectified radiative Gaussians."""

__version__ = "0.1.0"
