"""Desk-scale cycle-consistent controllable 3D generation."""

__version__ = "0.1.0"
