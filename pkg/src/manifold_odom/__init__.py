"""Manifold-aided 6D pose estimation for non-holonomic ground robots."""

__version__ = "0.1.0"
