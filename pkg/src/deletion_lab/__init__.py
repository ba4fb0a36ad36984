"""Data deletion for context estimation and regularised ERM."""

__version__ = "0.1.0"
