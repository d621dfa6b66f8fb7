"""Desk-scale numerics for expanding-on-average random surface dynamics."""

__version__ = "0.1.0"
