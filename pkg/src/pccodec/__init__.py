"""Learned point-cloud codec specialised for classification."""

__version__ = "0.1.0"
