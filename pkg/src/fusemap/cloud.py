from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class PointCloud:
    """3D points in meters with optional per-point unit normals.

    ``degenerate`` marks points whose neighbourhood was rank deficient during
    normal estimation; those carry a zero normal and must not be used as
    point-to-plane targets.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    degenerate: np.ndarray | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "points", pts)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        if self.normals is not None:
            nrm = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64).reshape(-1, 3))
            if len(nrm) != len(pts):
                raise ValueError("normals count must equal point count")
            object.__setattr__(self, "normals", nrm)
        if self.degenerate is not None:
            deg = np.asarray(self.degenerate, dtype=bool).reshape(-1)
            if len(deg) != len(pts):
                raise ValueError("degenerate mask length must equal point count")
            object.__setattr__(self, "degenerate", deg)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, mask) -> PointCloud:
        return PointCloud(
            self.points[mask],
            None if self.normals is None else self.normals[mask],
            None if self.degenerate is None else self.degenerate[mask],
        )

    def valid_normal_subset(self) -> PointCloud:
        """Drop points flagged degenerate by normal estimation."""
        if self.degenerate is None:
            return self
        return self.select(~self.degenerate)

    @staticmethod
    def concatenate(clouds) -> PointCloud:
        clouds = list(clouds)
        if not clouds:
            return PointCloud(np.empty((0, 3)))
        pts = np.concatenate([c.points for c in clouds], axis=0)
        if all(c.normals is not None for c in clouds):
            return PointCloud(pts, np.concatenate([c.normals for c in clouds], axis=0))
        return PointCloud(pts)
