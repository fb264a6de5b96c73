"""Hierarchical nested-transformer whole-brain segmentation with TICV/PFV heads."""

__version__ = "0.1.0"
