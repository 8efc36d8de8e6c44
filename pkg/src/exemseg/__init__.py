"""Exemplar-based interactive multi-lesion segmentation, desk scale."""

__version__ = "0.1.0"
