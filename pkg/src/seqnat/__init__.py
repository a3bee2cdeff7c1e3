"""Sequence-level training machinery for non-autoregressive sequence models."""

__version__ = "0.1.0"
