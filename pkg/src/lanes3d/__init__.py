"""3D lane geometry: LiDAR-driven annotation, extrinsic-free reconstruction,
consistent augmentation and the top-view IoU + chamfer lane metric."""

from .errors import *  # noqa: F401,F403
from .geometry import (  # noqa: F401
    CameraIntrinsics,
    Lane2D,
    Lane3D,
    RigidTransform,
    arc_length_resample,
    backproject,
    project,
    transform_cloud,
)

__version__ = "0.1.0"
