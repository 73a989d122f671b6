"""Synthetic clouds with known geometry for registration tests."""

import numpy as np

from fusemap.cloud import PointCloud


def corner_cloud(rng, n_per_plane=600, size=1.0, with_normals=True):
    """Three mutually orthogonal square patches meeting at the origin, with exact normals."""
    pts, nrm = [], []
    for axis in range(3):
        uv = rng.uniform(0.02, size, size=(n_per_plane, 2))
        p = np.zeros((n_per_plane, 3))
        others = [a for a in range(3) if a != axis]
        p[:, others[0]] = uv[:, 0]
        p[:, others[1]] = uv[:, 1]
        n = np.zeros((n_per_plane, 3))
        n[:, axis] = 1.0
        pts.append(p)
        nrm.append(n)
    pts = np.concatenate(pts) - size / 2
    return PointCloud(pts, np.concatenate(nrm) if with_normals else None)


def plane_cloud(rng, n=500):
    xy = rng.uniform(-1, 1, size=(n, 2))
    return PointCloud(np.column_stack([xy, np.zeros(n)]), np.tile([0, 0, 1.0], (n, 1)))
