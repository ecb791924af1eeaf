"""Desk-scale toolkit for learning vectorized bird's-eye-view road maps.

Pipeline: synthetic scenes (synth) -> per-camera view transform, pillar
aggregation and a convolutional decoder (bevnet) -> clustering and greedy
line connection into polylines (vectorize) -> Chamfer/AP/IoU scoring
(metrics).  geometry holds the camera and raster math, maps the vector-map
types, io the file formats, numerics the small dense-network stack.
"""

from .geometry import BevConfig, CameraModel, MaskedGrid
from .maps import CLASS_NAMES, Polyline, VectorMap
from .numerics import DenseLayer, DenseNet, Grid2D
from .pillars import PointCloud

__version__ = "0.1.0"

__all__ = [
    "BevConfig",
    "CameraModel",
    "MaskedGrid",
    "CLASS_NAMES",
    "Polyline",
    "VectorMap",
    "DenseLayer",
    "DenseNet",
    "Grid2D",
    "PointCloud",
    "__version__",
]
