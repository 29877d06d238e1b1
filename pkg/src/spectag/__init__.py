"""Confidence-aware superpixel classification and image tagging for multispectral images."""

__version__ = "0.1.0"
