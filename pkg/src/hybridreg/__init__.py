"""Hybrid-motion point cloud registration with uncertainty masks."""

__version__ = "0.1.0"
