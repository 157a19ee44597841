"""Hierarchical collaborative low-rank adaptation at desk scale."""

__version__ = "0.1.0"
