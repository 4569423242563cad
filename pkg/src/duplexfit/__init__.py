"""Fit articulated, skinned quadruped templates with duplex-mesh implicit texture to video."""

__version__ = "0.1.0"
