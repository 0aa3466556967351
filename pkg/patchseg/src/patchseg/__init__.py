"""Dual-context patch segmentation of FA-weighted direction maps."""

__version__ = "0.1.0"
