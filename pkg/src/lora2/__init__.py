"""Adaptive-rank low-rank adapters with a learned truncated-exponential rank."""

__version__ = "0.1.0"
