"""Trimodal (mask-image-language) referring image segmentation at desk scale."""

__version__ = "0.1.0"
