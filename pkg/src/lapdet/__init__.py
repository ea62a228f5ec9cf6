"""Twisted discrete Laplacian determinants on glued flat surfaces."""

__version__ = "0.1.0"
