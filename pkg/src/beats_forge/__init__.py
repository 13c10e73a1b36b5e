"""Iterative audio pre-training with acoustic tokenizers, at desk scale."""

__version__ = "0.1.0"
