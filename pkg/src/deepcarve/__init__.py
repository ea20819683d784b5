"""Weakly supervised attribute CNNs in numpy, with deep-carving pseudo-labels."""

__version__ = "0.1.0"
