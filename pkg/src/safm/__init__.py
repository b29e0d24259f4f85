"""Sparse adapter fusion for continual learning on a small transformer."""

__version__ = "0.1.0"
