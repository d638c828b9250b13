"""Diffusion with bidirectional selective state-space blocks for 3D point clouds."""

__version__ = "0.1.0"
