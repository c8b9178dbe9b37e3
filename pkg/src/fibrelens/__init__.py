"""Imaging through multimode fibres with a learned complex inverse matrix."""

__version__ = "0.1.0"
