"""Lightweight multi-session LiDAR mapping with line and plane landmarks.

The package covers the full back end: semantic feature extraction into
minimal line/plane landmarks, block-wise data association on the affine
Grassmannian, robust registration with PCM loop pruning, pose graph
optimization and line/plane bundle adjustment, a centralized map server,
and scan-to-map localization against the landmark map.
"""

from . import assoc, extract, geom, harness, localize, optimize, register, server
from .config import PipelineConfig

__all__ = [
    "assoc",
    "extract",
    "geom",
    "harness",
    "localize",
    "optimize",
    "register",
    "server",
    "PipelineConfig",
]

__version__ = "0.1.0"
