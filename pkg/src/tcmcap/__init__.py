"""Capacity estimates for wide two-layer networks with generic activations."""

__version__ = "0.1.0"
