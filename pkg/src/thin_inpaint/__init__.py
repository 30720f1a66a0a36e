"""Blind gap detection and inpainting for binary masks of thin structures."""

__version__ = "0.1.0"
