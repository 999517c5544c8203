"""Velocity reconstruction from density sequences on regular 3D grids."""

__version__ = "0.1.0"
