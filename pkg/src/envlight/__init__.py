"""Projector-based reproduction of environmental room lighting."""

__version__ = "0.1.0"
