"""Robust compact transformer classifiers for radio modulation signals."""

__version__ = "0.1.0"
