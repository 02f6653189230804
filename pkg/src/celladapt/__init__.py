"""Unsupervised domain adaptation for cell detection via pseudo cell-position heatmaps."""

__version__ = "0.1.0"
