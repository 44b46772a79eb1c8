"""Dual-margin prototype classification for long-tailed, open-set problems."""

__version__ = "0.1.0"
