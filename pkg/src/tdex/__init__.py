"""Tactile-image representations and nearest-neighbour retrieval for dexterous manipulation."""

__version__ = "0.1.0"
