"""Volumetric skull stripping with a compact dilated convolutional network."""

__version__ = "0.1.0"
