"""Fuse a pose stream and a depth stream into registered clouds, trajectories and occupancy maps."""

from .cloud import PointCloud
from .depth import CameraIntrinsics, DepthImage
from .geometry import SE3, Pose

__all__ = ["CameraIntrinsics", "DepthImage", "PointCloud", "Pose", "SE3"]
__version__ = "0.1.0"
