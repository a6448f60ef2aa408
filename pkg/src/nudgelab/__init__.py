"""Personalized-nudge trial engine."""

__version__ = "0.1.0"
