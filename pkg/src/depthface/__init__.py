"""Reconstruction of high-resolution 3D face meshes from single depth frames."""

__version__ = "0.1.0"
