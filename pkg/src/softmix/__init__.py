"""Decomposed soft actor-critic for cooperative multi-agent control."""

__version__ = "0.1.0"
