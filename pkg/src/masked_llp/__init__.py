"""Masked learning from label proportions with a weighted focal proportion loss."""

__version__ = "0.1.0"
