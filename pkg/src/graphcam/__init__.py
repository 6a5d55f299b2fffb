"""Chebyshev graph convolutional networks with class activation mapping."""

__version__ = "0.1.0"
