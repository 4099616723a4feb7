"""Convolutional-network training and evaluation engine for crop-disease
leaf classification experiments."""

__version__ = "0.1.0"
