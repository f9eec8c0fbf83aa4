"""Depth completion with a plane-residual depth representation."""

__version__ = "0.1.0"
