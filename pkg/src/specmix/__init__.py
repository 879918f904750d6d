"""Blind hyperspectral unmixing with a deep spectral convolution network."""

__version__ = "0.1.0"
