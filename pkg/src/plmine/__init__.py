"""Pseudo-label mining for open-vocabulary and semi-supervised detection."""

__version__ = "0.1.0"
