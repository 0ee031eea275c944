"""Offline 3D detection of general (unclassified) road obstacles."""

__version__ = "0.1.0"
