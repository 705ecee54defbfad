"""Dual-resolution 3-D CNN glioma segmentation and random-forest survival
prediction, runnable end to end on synthetic phantoms."""

__version__ = "0.1.0"
