"""Sparse monocular SLAM for low-texture thermal sequences."""

__version__ = "0.1.0"
