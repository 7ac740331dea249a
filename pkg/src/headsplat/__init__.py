"""Controllable 3D Gaussian head avatar with temporal hair dynamics (CPU-only)."""

__version__ = "0.1.0"
