"""Segmentation-guided LiDAR range-image super-resolution."""

__version__ = "0.1.0"
