"""Attention-guided deformable network for multi-frame HDR imaging."""

__version__ = "0.1.0"
