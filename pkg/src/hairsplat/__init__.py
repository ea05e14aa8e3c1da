"""Strand-based hair reconstruction with splatted 3D Gaussians, CPU only."""

__version__ = "0.1.0"
