"""Bag-of-visual-words kernel classifiers with relevance heatmaps for microscopy images."""

__version__ = "0.1.0"
