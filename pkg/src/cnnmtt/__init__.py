"""Transferable fully convolutional multi-target tracking on intensity images."""

__version__ = "0.1.0"
