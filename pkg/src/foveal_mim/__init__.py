"""Masked image modeling with foveal and peripheral masking for self-supervised vision."""

__version__ = "0.1.0"
