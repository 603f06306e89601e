"""Articulated 3D Gaussian human avatars: body model, fitting, splatting and training."""

__version__ = "0.1.0"
