"""Locating and ablating the few neurons whose loss collapses a vision-language model."""

__version__ = "0.1.0"
