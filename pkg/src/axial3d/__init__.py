"""Shared-embedding 3D axial attention for volumetric classification."""
__version__ = "0.1.0"
