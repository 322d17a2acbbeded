"""Talking-avatar generation from video references, at desk scale."""

__version__ = "0.1.0"
