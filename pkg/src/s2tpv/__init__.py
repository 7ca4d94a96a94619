"""Spatiotemporal tri-perspective-view (TPV) encoder for 3D semantic occupancy.

Modules:
    tensor      reverse-mode autodiff over numpy arrays
    geometry    rigid transforms, cameras, virtual view transformation, BEV warp
    tpv         TPV planes, learnable queries, cross-view references
    attention   deformable, spatial cross-, and (temporal) cross-view hybrid attention
    encoder     encoder layers and the unified / warp variants
    decoder     two-layer softplus occupancy head
    synthetic   ray-cast multi-camera scene generator, LiDAR and voxel labels
    training    losses, optimiser, training loop
    evaluation  confusion matrices, mIoU, temporal-range sweep, exports
    cli         command-line entry points
"""

from .encoder import EncoderConfig
from .errors import (
    ConfigError, DimensionError, GeometryError, LabelError, NumericError, RangeError, S2TPVError, WiringError,
)
from .model import OccupancyModel

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DimensionError", "EncoderConfig", "GeometryError", "LabelError", "NumericError",
    "OccupancyModel", "RangeError", "S2TPVError", "WiringError", "__version__",
]
