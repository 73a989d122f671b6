"""Trajectories from odometry and from chained ICP, and their comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .depth import prepare_cloud
from .errors import (
    EmptyInput,
    FusemapError,
    LengthMismatch,
    PairRegistrationError,
    TimestampMismatch,
    ValidationError,
)
from .geometry import SE3, compose, from_quaternion_translation, relative, to_quaternion
from .registration import POINT_TO_PLANE, IcpConfig, IcpResult, best_fit_rigid, register
from .sync import FrameSet

INIT_MODES = ("identity", "odometry_prior")
CSV_HEADER = ["timestamp_us", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


@dataclass
class Trajectory:
    timestamps: list[int]
    poses: list[SE3]

    def __post_init__(self):
        if len(self.timestamps) != len(self.poses):
            raise LengthMismatch("timestamps and poses differ in length")
        for i in range(1, len(self.timestamps)):
            if self.timestamps[i] <= self.timestamps[i - 1]:
                raise ValidationError(f"trajectory timestamps not strictly increasing at index {i}")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses]).reshape(-1, 3)

    def relatives(self) -> list[SE3]:
        return [relative(a, b) for a, b in zip(self.poses, self.poses[1:])]

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for ts, pose in zip(self.timestamps, self.poses):
                vals = [*pose.translation, *to_quaternion(pose)]
                w.writerow([ts, *(f"{v:.9g}" for v in vals)])

    @classmethod
    def load_csv(cls, path) -> Trajectory:
        stamps, poses = [], []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            header = next(r, None)
            if header != CSV_HEADER:
                raise ValidationError(f"{path}: unexpected trajectory header {header}")
            for row in r:
                stamps.append(int(row[0]))
                vals = [float(v) for v in row[1:]]
                poses.append(from_quaternion_translation(vals[3:], vals[:3]))
        return cls(stamps, poses)


@dataclass
class TrajectoryStats:
    ate_rmse: float
    max_error: float
    per_axis_rmse: np.ndarray
    path_length: float


def path_length(positions: np.ndarray) -> float:
    if len(positions) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))


def accumulate(initial: SE3, relatives: Sequence[SE3], timestamps: Sequence[int]) -> Trajectory:
    if len(timestamps) != len(relatives) + 1:
        raise LengthMismatch(f"{len(relatives)} relatives need {len(relatives) + 1} timestamps, got {len(timestamps)}")
    poses = [initial]
    for rel in relatives:
        poses.append(compose(poses[-1], rel))
    return Trajectory(list(timestamps), poses)


def odometry_trajectory(framesets: Sequence[FrameSet], mount: SE3) -> Trajectory:
    """World pose of the depth camera per frame: tracker pose composed with the mount."""
    if not framesets:
        raise EmptyInput("odometry_trajectory needs at least one frameset")
    return Trajectory([fs.timestamp for fs in framesets],
                      [compose(fs.pose.transform, mount) for fs in framesets])


def icp_trajectory(framesets: Sequence[FrameSet], mount: SE3, cfg: IcpConfig,
                   init_mode: str = "odometry_prior", decimation_factor: int = 1,
                   voxel_size: float = 0.0, normal_k: int = 30,
                   spatial: dict | None = None) -> tuple[Trajectory, list[IcpResult]]:
    """Chain pairwise registrations of consecutive keyframes.

    Each later frame is the source and the earlier frame the target, so every
    result is ``prev_from_next`` and the chain accumulates by right
    multiplication from the first odometry pose.  A failed pair raises
    :class:`PairRegistrationError` carrying the trajectory up to that pair.
    """
    if init_mode not in INIT_MODES:
        raise ValidationError(f"init_mode must be one of {INIT_MODES}")
    if len(framesets) < 2:
        raise EmptyInput("icp_trajectory needs at least two framesets")
    odo = odometry_trajectory(framesets, mount)
    want_normals = cfg.method == POINT_TO_PLANE
    clouds = [None] * len(framesets)

    def cloud(i):
        if clouds[i] is None:
            clouds[i] = prepare_cloud(framesets[i].depth, decimation_factor, voxel_size,
                                      normals=want_normals, normal_k=normal_k, spatial=spatial)
        return clouds[i]

    results: list[IcpResult] = []
    rels: list[SE3] = []
    for k in range(1, len(framesets)):
        init = relative(odo.poses[k - 1], odo.poses[k]) if init_mode == "odometry_prior" else SE3.identity()
        pair_cfg = IcpConfig(cfg.method, cfg.max_correspondence_distance, cfg.max_iterations,
                             cfg.rel_rmse_eps, cfg.rel_fitness_eps, init)
        try:
            res = register(cloud(k), cloud(k - 1), pair_cfg)
        except FusemapError as exc:
            partial = accumulate(odo.poses[0], rels, odo.timestamps[:k])
            raise PairRegistrationError(k - 1, exc, partial, results) from exc
        clouds[k - 1] = None
        results.append(res)
        rels.append(res.transform)
    return accumulate(odo.poses[0], rels, odo.timestamps), results


def align_rigid(reference: np.ndarray, moving: np.ndarray) -> SE3:
    """Least-squares rigid transform taking ``moving`` positions onto ``reference``."""
    if len(reference) < 3:
        # too few points for a well-defined rotation; align centroids only
        return SE3.from_translation(reference.mean(axis=0) - moving.mean(axis=0))
    return best_fit_rigid(moving, reference)


def compare(a: Trajectory, b: Trajectory, align: str = "none") -> TrajectoryStats:
    """Translation error statistics of ``b`` against ``a``."""
    if len(a) != len(b):
        raise LengthMismatch(f"trajectories differ in length ({len(a)} vs {len(b)})")
    if len(a) == 0:
        raise EmptyInput("cannot compare empty trajectories")
    ta, tb = np.asarray(a.timestamps), np.asarray(b.timestamps)
    if np.any(np.abs(ta - tb) > 1000):
        raise TimestampMismatch("trajectory timestamps differ by more than 1 ms")
    pa, pb = a.positions(), b.positions()
    if align == "rigid":
        g = align_rigid(pa, pb)
        pb = pb @ g.rotation.T + g.translation
    elif align != "none":
        raise ValidationError(f"align must be 'none' or 'rigid', got {align!r}")
    err = pb - pa
    norms = np.linalg.norm(err, axis=1)
    return TrajectoryStats(
        ate_rmse=float(math.sqrt(np.mean(norms ** 2))),
        max_error=float(norms.max()),
        per_axis_rmse=np.sqrt(np.mean(err ** 2, axis=0)),
        path_length=path_length(pb),
    )
