"""Numerical laboratory for Fourier extension estimates with weights."""

__version__ = "0.1.0"
