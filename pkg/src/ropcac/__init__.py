"""Rendering-oriented point cloud attribute codec."""

__version__ = "0.1.0"
