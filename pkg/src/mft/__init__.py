"""Managed file transfer with a separated control path and data path."""

__version__ = "0.1.0"
