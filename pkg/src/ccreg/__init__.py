"""Deformable 3D registration with cycle-consistent coordinate networks."""

__version__ = "0.1.0"
