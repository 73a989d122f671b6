"""Fused global clouds and a log-odds occupancy octree with voxel export.

Leaves are stored sparsely, keyed by the Morton code of their integer voxel
coordinates (a linear octree): nodes exist only once a ray touches them, and
coarser levels are derived on demand by dropping the low three bits per level.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cloud import PointCloud
from .depth import prepare_cloud, voxel_downsample
from .errors import InvalidParameter, LengthMismatch
from .geometry import apply
from .sync import FrameSet
from .trajectory import Trajectory

UNKNOWN, FREE, OCCUPIED = "unknown", "free", "occupied"


def logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def logistic(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _spread_bits(v: np.ndarray) -> np.ndarray:
    x = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def _compact_bits(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & np.uint64(0x1249249249249249)
    x = (x ^ (x >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    x = (x ^ (x >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    x = (x ^ (x >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    x = (x ^ (x >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    x = (x ^ (x >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return x


def morton_encode(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys).reshape(-1, 3)
    return _spread_bits(keys[:, 0]) | (_spread_bits(keys[:, 1]) << np.uint64(1)) | (
        _spread_bits(keys[:, 2]) << np.uint64(2))


def morton_decode(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64).reshape(-1)
    return np.column_stack([_compact_bits(codes >> np.uint64(s)) for s in (0, 1, 2)]).astype(np.int64)


# ---------------------------------------------------------------- traversal

def traverse_ray(origin, end, resolution: float) -> list[tuple[int, int, int]]:
    """Voxel indices visited by the segment ``origin -> end`` in order (Amanatides & Woo).

    Both the start and end voxels are included.
    """
    o = np.asarray(origin, dtype=np.float64) / resolution
    e = np.asarray(end, dtype=np.float64) / resolution
    cur = [int(math.floor(c)) for c in o]
    last = [int(math.floor(c)) for c in e]
    d = e - o
    step, t_max, t_delta = [0, 0, 0], [math.inf] * 3, [math.inf] * 3
    for a in range(3):
        if d[a] > 0:
            step[a] = 1
            t_max[a] = (cur[a] + 1 - o[a]) / d[a]
            t_delta[a] = 1.0 / d[a]
        elif d[a] < 0:
            step[a] = -1
            t_max[a] = (cur[a] - o[a]) / d[a]
            t_delta[a] = -1.0 / d[a]
    # exact crossing count keeps the walk from over/undershooting on rounding
    remaining = sum(abs(last[a] - cur[a]) for a in range(3))
    out = [tuple(cur)]
    for _ in range(remaining):
        a = min(range(3), key=lambda i: (t_max[i] if cur[i] != last[i] else math.inf))
        cur[a] += step[a]
        t_max[a] += t_delta[a]
        out.append(tuple(cur))
    return out


def traverse_rays(origin, ends: np.ndarray, resolution: float) -> tuple[np.ndarray, np.ndarray]:
    """Batched traversal of rays sharing one origin.

    Returns ``(ray_index, voxel_keys)``: for every ray, its visited voxel
    indices in order from the start voxel to the end voxel.
    """
    ends = np.asarray(ends, dtype=np.float64).reshape(-1, 3) / resolution
    o = np.asarray(origin, dtype=np.float64).reshape(3) / resolution
    n_rays = len(ends)
    start = np.floor(o).astype(np.int64)
    last = np.floor(ends).astype(np.int64)
    d = ends - o
    counts = np.abs(last - start)  # crossings per ray per axis
    ray_ids, ts, axes, steps = [], [], [], []
    for a in range(3):
        n = counts[:, a]
        total = int(n.sum())
        if total == 0:
            continue
        rid = np.repeat(np.arange(n_rays), n)
        j = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
        sgn = np.sign(d[rid, a]).astype(np.int64)
        plane = np.where(sgn > 0, start[a] + 1 + j, start[a] - j)
        ray_ids.append(rid)
        ts.append((plane - o[a]) / d[rid, a])
        axes.append(np.full(total, a))
        steps.append(sgn)
    per_ray = counts.sum(axis=1) + 1
    offsets = np.cumsum(per_ray) - per_ray
    out_ray = np.repeat(np.arange(n_rays), per_ray)
    out_keys = np.repeat(start[None, :], int(per_ray.sum()), axis=0)
    if ray_ids:
        rid = np.concatenate(ray_ids)
        t = np.concatenate(ts)
        ax = np.concatenate(axes)
        st = np.concatenate(steps)
        order = np.lexsort((ax, t, rid))
        rid, ax, st = rid[order], ax[order], st[order]
        delta = np.zeros((len(rid), 3), dtype=np.int64)
        delta[np.arange(len(rid)), ax] = st
        cum = np.cumsum(delta, axis=0)
        # restart the running sum at each ray
        crossings = counts.sum(axis=1)
        first = np.cumsum(crossings) - crossings
        base = np.zeros((n_rays, 3), dtype=np.int64)
        has = crossings > 0
        base[has] = cum[first[has]] - delta[first[has]]
        rel = cum - base[rid]
        pos_in_ray = np.arange(len(rid)) - first[rid] + 1
        out_keys[offsets[rid] + pos_in_ray] = start + rel
    return out_ray, out_keys


# ---------------------------------------------------------------- octree

@dataclass
class OccupancyOctree:
    resolution: float = 0.05
    tree_depth: int = 16
    p_hit: float = 0.7
    p_miss: float = 0.4
    clamp_min: float = 0.12
    clamp_max: float = 0.97
    occupied_threshold: float = 0.5
    leaves: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.resolution > 0:
            raise InvalidParameter("resolution must be positive")
        if not 1 <= self.tree_depth <= 21:
            raise InvalidParameter("tree_depth must be in [1, 21]")
        if not 0.5 < self.p_hit < 1 or not 0 < self.p_miss < 0.5:
            raise InvalidParameter("require 0.5 < p_hit < 1 and 0 < p_miss < 0.5")
        if not 0 < self.clamp_min < self.clamp_max < 1:
            raise InvalidParameter("require 0 < clamp_min < clamp_max < 1")
        self.l_hit = logit(self.p_hit)
        self.l_miss = logit(self.p_miss)
        self.l_min = logit(self.clamp_min)
        self.l_max = logit(self.clamp_max)

    @property
    def key_offset(self) -> int:
        return 1 << (self.tree_depth - 1)

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64).reshape(-1, 3) / self.resolution).astype(np.int64)

    def in_bounds(self, idx: np.ndarray) -> np.ndarray:
        k = idx + self.key_offset
        return np.all((k >= 0) & (k < (1 << self.tree_depth)), axis=1)

    def codes(self, idx: np.ndarray) -> np.ndarray:
        return morton_encode(np.asarray(idx) + self.key_offset)

    def index_of_codes(self, codes) -> np.ndarray:
        return morton_decode(codes) - self.key_offset

    def centers(self, idx: np.ndarray) -> np.ndarray:
        return (np.asarray(idx, dtype=np.float64) + 0.5) * self.resolution

    def log_odds(self, point) -> float | None:
        code = int(self.codes(self.voxel_index(point))[0])
        return self.leaves.get(code)

    def _update(self, codes: np.ndarray, delta: float) -> None:
        if len(codes) == 0:
            return
        keys = codes.tolist()
        get = self.leaves.get
        vals = np.fromiter((get(k, 0.0) for k in keys), dtype=np.float64, count=len(keys))
        vals = np.clip(vals + delta, self.l_min, self.l_max)
        self.leaves.update(zip(keys, vals.tolist()))

    def inner_log_odds(self, level: int) -> dict[int, float]:
        """Node values ``level`` steps above the leaves (max over children, as OctoMap does)."""
        if not self.leaves:
            return {}
        codes = np.fromiter(self.leaves.keys(), dtype=np.uint64, count=len(self.leaves))
        vals = np.fromiter(self.leaves.values(), dtype=np.float64, count=len(self.leaves))
        parents = codes >> np.uint64(3 * level)
        order = np.argsort(parents, kind="stable")
        parents, vals = parents[order], vals[order]
        uniq, first = np.unique(parents, return_index=True)
        return dict(zip(uniq.tolist(), np.maximum.reduceat(vals, first).tolist()))

    def occupied_codes(self) -> np.ndarray:
        l_thr = logit(self.occupied_threshold)
        codes = [k for k, v in self.leaves.items() if v >= l_thr]
        return np.sort(np.asarray(codes, dtype=np.uint64))


def integrate(tree: OccupancyOctree, cloud_world: PointCloud, sensor_origin, max_range: float,
              carve_free: bool = False) -> OccupancyOctree:
    """Fold one scan into ``tree`` in place and return it.

    Endpoints get a hit update.  With ``carve_free`` every voxel strictly
    between the sensor voxel and the endpoint voxel gets a miss update.  A
    voxel changes at most once per call; a hit wins over a miss.
    """
    if not max_range > 0:
        raise InvalidParameter("max_range must be positive")
    if len(cloud_world) == 0:
        return tree
    origin = np.asarray(sensor_origin, dtype=np.float64).reshape(3)
    pts = cloud_world.points
    pts = pts[np.linalg.norm(pts - origin, axis=1) <= max_range]
    end_idx = tree.voxel_index(pts)
    inside = tree.in_bounds(end_idx)
    pts, end_idx = pts[inside], end_idx[inside]
    hit_codes = np.unique(tree.codes(end_idx))
    if carve_free and len(pts):
        ray, keys = traverse_rays(origin, pts, tree.resolution)
        start = tree.voxel_index(origin)[0]
        interior = np.any(keys != start, axis=1) & np.any(keys != end_idx[ray], axis=1)
        keys = keys[interior]
        keys = keys[tree.in_bounds(keys)]
        miss_codes = np.setdiff1d(np.unique(tree.codes(keys)), hit_codes, assume_unique=True)
        tree._update(miss_codes, tree.l_miss)
    tree._update(hit_codes, tree.l_hit)
    return tree


def query(tree: OccupancyOctree, point) -> tuple[str, float]:
    """Classify the voxel containing ``point``; probability is 0.5 when unknown."""
    lo = tree.log_odds(point)
    if lo is None:
        return UNKNOWN, 0.5
    p = float(logistic(lo))
    return (OCCUPIED if p >= tree.occupied_threshold else FREE), p


# ---------------------------------------------------------------- export

@dataclass
class VoxelList:
    centers: np.ndarray
    size: float
    probabilities: np.ndarray
    colors: np.ndarray  # 0 at the lowest voxel (blue) .. 1 at the highest (red)

    def __len__(self) -> int:
        return len(self.centers)


def height_colors(z: np.ndarray) -> np.ndarray:
    """Normalised height in [0, 1]; a flat set maps to 0.5."""
    z = np.asarray(z, dtype=np.float64)
    if len(z) == 0:
        return z
    lo, hi = z.min(), z.max()
    if hi - lo <= 0:
        return np.full(len(z), 0.5)
    return (z - lo) / (hi - lo)


def colormap_blue_red(values: np.ndarray) -> np.ndarray:
    """Linear (0,0,255) -> (255,0,0) ramp as uint8 RGB."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    rgb = np.zeros((len(v), 3), dtype=np.uint8)
    rgb[:, 0] = np.floor(255 * v + 0.5)
    rgb[:, 2] = np.floor(255 * (1 - v) + 0.5)
    return rgb


def export_voxels(tree: OccupancyOctree) -> VoxelList:
    codes = tree.occupied_codes()
    if len(codes) == 0:
        return VoxelList(np.empty((0, 3)), tree.resolution, np.empty(0), np.empty(0))
    centers = tree.centers(tree.index_of_codes(codes))
    probs = logistic([tree.leaves[int(c)] for c in codes])
    return VoxelList(centers, tree.resolution, probs, height_colors(centers[:, 2]))


def fuse_clouds(framesets: Sequence[FrameSet], trajectory: Trajectory, voxel_size: float = 0.0,
                decimation_factor: int = 1) -> PointCloud:
    """Express every keyframe cloud in the world frame and merge them."""
    if len(framesets) != len(trajectory):
        raise LengthMismatch(f"{len(framesets)} framesets vs {len(trajectory)} trajectory poses")
    clouds = [apply(pose, prepare_cloud(fs.depth, decimation_factor))
              for fs, pose in zip(framesets, trajectory.poses)]
    fused = PointCloud.concatenate(clouds)
    if voxel_size > 0:
        fused = voxel_downsample(fused, voxel_size)
    return fused


def build_map(framesets: Sequence[FrameSet], trajectory: Trajectory, tree: OccupancyOctree,
              max_range: float = 10.0, carve_free: bool = False, decimation_factor: int = 1,
              voxel_size: float = 0.0) -> OccupancyOctree:
    """Integrate every keyframe, one scan per frame, from its own sensor origin."""
    if len(framesets) != len(trajectory):
        raise LengthMismatch(f"{len(framesets)} framesets vs {len(trajectory)} trajectory poses")
    for fs, pose in zip(framesets, trajectory.poses):
        pc = apply(pose, prepare_cloud(fs.depth, decimation_factor, voxel_size))
        integrate(tree, pc, pose.translation, max_range, carve_free=carve_free)
    return tree


# ---------------------------------------------------------------- files

def write_ply(path, points: np.ndarray, rgb: np.ndarray) -> None:
    """Binary little-endian PLY with float xyz and uchar rgb per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(rgb, dtype=np.uint8).reshape(-1, 3)
    if len(points) != len(rgb):
        raise ValueError("points and colors differ in length")
    rec = np.empty(len(points), dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    for i, name in enumerate("xyz"):
        rec[name] = points[:, i]
    for i, name in enumerate(("red", "green", "blue")):
        rec[name] = rgb[:, i]
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    n = 0
    for line in data[:end].decode("ascii").splitlines():
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    rec = np.frombuffer(data[end:], dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                           ("red", "u1"), ("green", "u1"), ("blue", "u1")], count=n)
    return (np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(np.float64),
            np.column_stack([rec["red"], rec["green"], rec["blue"]]))


def write_voxel_csv(path, voxels: VoxelList) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cx", "cy", "cz", "size_m", "prob"])
        for c, p in zip(voxels.centers, voxels.probabilities):
            w.writerow([f"{c[0]:.9g}", f"{c[1]:.9g}", f"{c[2]:.9g}", f"{voxels.size:.9g}", f"{p:.9g}"])
