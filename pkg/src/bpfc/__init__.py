"""Bit-plane feature consistency training and robustness evaluation."""

__version__ = "0.1.0"
