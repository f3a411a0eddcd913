"""Finite-dimensional quantum estimation laboratory."""
__version__ = "0.1.0"
