"""Geometry, matching, place recognition, pose-graph and evaluation tools for visual SLAM."""

from .errors import SlamKitError

__version__ = "0.1.0"

__all__ = ["SlamKitError", "__version__"]
