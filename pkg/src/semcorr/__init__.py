"""Sparse semantic correspondence via alignable 3D object-class
representations built from annotated images with precomputed monocular depth
and patch features."""

__version__ = "0.1.0"
