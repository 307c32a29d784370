"""Kinetic model discovery with constrained symbolic regression."""

__version__ = "0.1.0"
