"""Anatomically constrained streamline tractography on tensor fields."""

__version__ = "0.1.0"
