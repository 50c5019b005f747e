"""Incremental multi-target domain adaptation for a miniature two-stage detector."""

__version__ = "0.1.0"
