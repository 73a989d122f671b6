"""Depth rasters, pinhole deprojection and the depth/cloud filters."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import InvalidFactor, InvalidParameter, TooFewPoints

DECIMATION_FACTORS = (1, 2, 4, 8)
# chunk size for batched neighbourhood covariances (bounds peak memory)
_NORMAL_CHUNK = 50_000


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 0.001

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.depth_scale > 0:
            raise ValueError("depth_scale must be positive")

    @classmethod
    def from_fov(cls, width: int = 640, height: int = 480, hfov_deg: float = 87.0,
                 depth_scale: float = 0.001) -> CameraIntrinsics:
        """Square-pixel intrinsics from a horizontal field of view."""
        f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
        return cls(width, height, f, f, (width - 1) / 2, (height - 1) / 2, depth_scale)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "depth_scale": self.depth_scale,
        }


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Raw 16-bit depth raster, row-major ``(height, width)``; 0 marks no return."""

    values: np.ndarray
    timestamp: int
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        v = np.asarray(self.values)
        k = self.intrinsics
        if v.size != k.width * k.height:
            raise ValueError(f"expected {k.width * k.height} depth values, got {v.size}")
        v = np.ascontiguousarray(v.reshape(k.height, k.width).astype(np.uint16, copy=False))
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


def deproject(img: DepthImage) -> PointCloud:
    k = img.intrinsics
    v, u = np.nonzero(img.values)
    z = img.values[v, u].astype(np.float64) * k.depth_scale
    x = (u - k.cx) * z / k.fx
    y = (v - k.cy) * z / k.fy
    return PointCloud(np.column_stack([x, y, z]))


def project(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel coordinates ``(u, v)`` and raw depth of camera-frame points."""
    z = points[:, 2]
    return points[:, 0] * k.fx / z + k.cx, points[:, 1] * k.fy / z + k.cy, z / k.depth_scale


def decimate(img: DepthImage, factor: int) -> DepthImage:
    """Block median over nonzero raw values; intrinsics rescaled to the coarse grid.

    The principal point is mapped with the pixel-centre convention
    ``c' = (c + 0.5) / f - 0.5`` so the coarse pixel grid stays aligned with
    the centres of the blocks it summarises.
    """
    if factor not in DECIMATION_FACTORS:
        raise InvalidFactor(f"decimation factor must be one of {DECIMATION_FACTORS}, got {factor!r}")
    if factor == 1:
        return img
    k = img.intrinsics
    h2, w2 = -(-k.height // factor), -(-k.width // factor)
    padded = np.zeros((h2 * factor, w2 * factor), dtype=np.float64)
    padded[: k.height, : k.width] = img.values
    padded[padded == 0] = np.nan
    blocks = padded.reshape(h2, factor, w2, factor).transpose(0, 2, 1, 3).reshape(h2, w2, -1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        med = np.nanmedian(blocks, axis=2)
    out = np.where(np.isnan(med), 0.0, np.floor(med + 0.5)).astype(np.uint16)
    scaled = CameraIntrinsics(
        w2, h2, k.fx / factor, k.fy / factor,
        (k.cx + 0.5) / factor - 0.5, (k.cy + 0.5) / factor - 0.5, k.depth_scale,
    )
    return DepthImage(out, img.timestamp, scaled)


def voxel_keys(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(points / voxel_size).astype(np.int64)


def voxel_downsample(pc: PointCloud, voxel_size: float) -> PointCloud:
    """One centroid per occupied voxel; output ordered by voxel key."""
    if not voxel_size > 0:
        raise InvalidParameter("voxel_size must be positive")
    if len(pc) == 0:
        return PointCloud(np.empty((0, 3)))
    keys = voxel_keys(pc.points, voxel_size)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inv, pc.points)
    return PointCloud(sums / counts[:, None])


def estimate_normals(pc: PointCloud, k: int = 30, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """PCA normals over the ``k`` nearest neighbours, oriented toward ``viewpoint``.

    Points whose two smallest covariance eigenvalues are both below 1e-12 get a
    zero normal and are flagged in ``degenerate``.
    """
    if k < 3:
        raise InvalidParameter("k must be at least 3")
    n = len(pc)
    if n < k:
        raise TooFewPoints(f"need at least {k} points for normal estimation, got {n}")
    pts = pc.points
    tree = cKDTree(pts)
    normals = np.empty((n, 3))
    degenerate = np.zeros(n, dtype=bool)
    for lo in range(0, n, _NORMAL_CHUNK):
        hi = min(lo + _NORMAL_CHUNK, n)
        _, idx = tree.query(pts[lo:hi], k=k)
        nb = pts[idx]
        centred = nb - nb.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centred, centred) / k
        evals, evecs = np.linalg.eigh(cov)
        normals[lo:hi] = evecs[:, :, 0]
        degenerate[lo:hi] = evals[:, 1] < 1e-12
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    to_view = np.asarray(viewpoint, dtype=np.float64) - pts
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1
    normals[degenerate] = 0.0
    return PointCloud(pts, normals, degenerate)


def _recursive_pass(x: np.ndarray, alpha: float, delta: float, reverse: bool) -> np.ndarray:
    """One exponential smoothing sweep along axis 1, vectorised over rows."""
    y = x.copy()
    cols = range(x.shape[1] - 2, -1, -1) if reverse else range(1, x.shape[1])
    step = 1 if reverse else -1
    for i in cols:
        prev = i + step
        xi, xp = x[:, i], x[:, prev]
        reset = (xi == 0) | (xp == 0) | (np.abs(xi - xp) > delta)
        y[:, i] = np.where(reset, xi, alpha * xi + (1 - alpha) * y[:, prev])
    return y


def spatial_filter(img: DepthImage, alpha: float = 0.5, delta: float = 20.0,
                   iterations: int = 2) -> DepthImage:
    """Edge-preserving recursive smoothing along rows then columns."""
    if not 0 < alpha <= 1:
        raise InvalidParameter(f"alpha must be in (0, 1], got {alpha}")
    if not delta >= 0:
        raise InvalidParameter(f"delta must be non-negative, got {delta}")
    if int(iterations) != iterations or iterations < 1:
        raise InvalidParameter(f"iterations must be an integer >= 1, got {iterations}")
    x = img.values.astype(np.float64)
    invalid = x == 0
    for _ in range(int(iterations)):
        x = _recursive_pass(x, alpha, delta, reverse=False)
        x = _recursive_pass(x, alpha, delta, reverse=True)
        x = _recursive_pass(x.T, alpha, delta, reverse=False)
        x = _recursive_pass(x, alpha, delta, reverse=True).T
    out = np.floor(x + 0.5)
    out[invalid] = 0
    return replace(img, values=np.clip(out, 0, 65535).astype(np.uint16))


def prepare_cloud(img: DepthImage, decimation_factor: int = 1, voxel_size: float = 0.0,
                  normals: bool = False, normal_k: int = 30,
                  spatial: dict | None = None) -> PointCloud:
    """Depth frame to camera-frame cloud: decimate, optional spatial filter, deproject, downsample, normals."""
    img = decimate(img, decimation_factor)
    if spatial:
        img = spatial_filter(img, **spatial)
    pc = deproject(img)
    if voxel_size and voxel_size > 0:
        pc = voxel_downsample(pc, voxel_size)
    if normals:
        pc = estimate_normals(pc, k=min(normal_k, len(pc)) if len(pc) >= 3 else normal_k)
    return pc
