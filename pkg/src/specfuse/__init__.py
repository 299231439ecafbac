"""Unsupervised, registration-free hyperspectral/multispectral fusion."""

__version__ = "0.1.0"
