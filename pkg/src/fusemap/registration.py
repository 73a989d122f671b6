"""Point-to-point and point-to-plane ICP with fitness / inlier-RMSE metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import (
    DegenerateCorrespondences,
    EmptyCloud,
    InvalidParameter,
    MissingNormals,
    SingularSystem,
)
from .geometry import SE3, compose, rotvec_to_matrix, transform_points

POINT_TO_POINT = "point_to_point"
POINT_TO_PLANE = "point_to_plane"
METHODS = (POINT_TO_POINT, POINT_TO_PLANE)
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class IcpConfig:
    method: str = POINT_TO_PLANE
    max_correspondence_distance: float = 0.05
    max_iterations: int = 50
    rel_rmse_eps: float = 1e-6
    rel_fitness_eps: float = 1e-6
    init: SE3 = field(default_factory=SE3.identity)

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidParameter(f"unknown ICP method {self.method!r}")
        if not self.max_correspondence_distance > 0:
            raise InvalidParameter("max_correspondence_distance must be positive")
        if self.max_iterations < 1:
            raise InvalidParameter("max_iterations must be >= 1")
        if self.rel_rmse_eps < 0 or self.rel_fitness_eps < 0:
            raise InvalidParameter("convergence thresholds must be non-negative")


@dataclass
class IcpResult:
    transform: SE3
    fitness: float
    inlier_rmse: float
    iterations: int
    elapsed: float
    # per iteration: objective over the fixed correspondences before and after the step
    objective_history: list = field(default_factory=list, repr=False)


class SpatialIndex:
    """Exact nearest-neighbour index over a target cloud."""

    def __init__(self, points: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self._tree = cKDTree(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def nearest(self, queries: np.ndarray, max_distance: float = np.inf):
        """Distances and indices of nearest targets; misses get ``inf`` and index ``len(self)``."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        return self._tree.query(q, k=1, distance_upper_bound=max_distance, workers=-1)

    def within(self, query, radius: float) -> list[int]:
        return sorted(self._tree.query_ball_point(np.asarray(query, dtype=np.float64), radius))


def build_index(target: PointCloud) -> SpatialIndex:
    if len(target) == 0:
        raise EmptyCloud("cannot index an empty cloud")
    return SpatialIndex(target.points)


def _correspond(index: SpatialIndex, moved: np.ndarray, max_distance: float):
    dist, idx = index.nearest(moved, max_distance)
    inlier = np.isfinite(dist)
    return dist, idx, inlier


def _metrics(dist: np.ndarray, inlier: np.ndarray, n_source: int) -> tuple[float, float]:
    n = int(inlier.sum())
    if n == 0:
        return 0.0, 0.0
    return n / n_source, float(np.sqrt(np.mean(dist[inlier] ** 2)))


def evaluate(source: PointCloud, target: PointCloud, t: SE3, max_distance: float) -> tuple[float, float]:
    """(fitness, inlier_rmse) of ``source`` mapped by ``t`` against ``target``.

    With no inliers the RMSE is reported as 0; check ``fitness == 0`` to tell
    that case apart from a perfect fit.
    """
    if len(target) == 0 or len(source) == 0:
        raise EmptyCloud("evaluate needs non-empty source and target")
    index = build_index(target)
    dist, _, inlier = _correspond(index, transform_points(t, source.points), max_distance)
    return _metrics(dist, inlier, len(source))


def best_fit_rigid(src: np.ndarray, dst: np.ndarray) -> SE3:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (Kabsch/Umeyama, no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    v = vt.T
    if np.linalg.det(v @ u.T) < 0:
        v[:, -1] *= -1
    r = v @ u.T
    return SE3(r, mu_d - r @ mu_s)


def _p2p_step(p: np.ndarray, q: np.ndarray, _n) -> SE3:
    return best_fit_rigid(p, q)


def _p2l_step(p: np.ndarray, q: np.ndarray, n: np.ndarray) -> SE3:
    # linearise R ~ I + [w]x around the current estimate
    r = np.einsum("ij,ij->i", p - q, n)
    jac = np.hstack([np.cross(p, n), n])
    ata = jac.T @ jac
    cond = np.linalg.cond(ata)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularSystem(f"point-to-plane normal equations ill-conditioned (cond={cond:.3g})")
    x = np.linalg.solve(ata, -jac.T @ r)
    return SE3(rotvec_to_matrix(x[:3]), x[3:])


def _objective(method: str, p: np.ndarray, q: np.ndarray, n) -> float:
    if method == POINT_TO_PLANE:
        return float(np.sum(np.einsum("ij,ij->i", p - q, n) ** 2))
    return float(np.sum((p - q) ** 2))


def _icp(source: PointCloud, target: PointCloud, cfg: IcpConfig, method: str) -> IcpResult:
    start = time.perf_counter()
    if len(source) == 0 or len(target) == 0:
        raise EmptyCloud("ICP needs non-empty source and target clouds")
    normals = None
    full_index = None
    if method == POINT_TO_PLANE:
        if target.normals is None:
            raise MissingNormals("point-to-plane needs target normals")
        usable = target.valid_normal_subset()
        if len(usable) != len(target):
            full_index = build_index(target)
        target = usable
        if len(target) == 0:
            raise MissingNormals("every target normal is degenerate")
        normals = target.normals
    index = build_index(target)
    step = _p2l_step if method == POINT_TO_PLANE else _p2p_step
    src = source.points
    tgt = target.points
    t = cfg.init
    history = []
    prev = None
    iterations = 0
    for it in range(cfg.max_iterations):
        moved = transform_points(t, src)
        dist, idx, inlier = _correspond(index, moved, cfg.max_correspondence_distance)
        n_in = int(inlier.sum())
        if n_in < 3:
            raise DegenerateCorrespondences(
                f"only {n_in} correspondences within {cfg.max_correspondence_distance} m at iteration {it}"
            )
        fitness, rmse = _metrics(dist, inlier, len(src))
        if rmse == 0.0:
            break  # every inlier already coincides; no step can improve
        if prev is not None and abs(prev[0] - fitness) < cfg.rel_fitness_eps \
                and abs(prev[1] - rmse) < cfg.rel_rmse_eps:
            break
        prev = (fitness, rmse)
        p = moved[inlier]
        q = tgt[idx[inlier]]
        nq = None if normals is None else normals[idx[inlier]]
        delta = step(p, q, nq)
        before = _objective(method, p, q, nq)
        after = _objective(method, transform_points(delta, p), q, nq)
        history.append((before, after))
        t = compose(delta, t)
        iterations += 1
    final_index = full_index if full_index is not None else index
    dist, _, inlier = _correspond(final_index, transform_points(t, src), cfg.max_correspondence_distance)
    fitness, rmse = _metrics(dist, inlier, len(src))
    return IcpResult(t, fitness, rmse, iterations, time.perf_counter() - start, history)


def register_point_to_point(source: PointCloud, target: PointCloud, cfg: IcpConfig) -> IcpResult:
    """Estimate ``target_from_source`` with closed-form SVD updates."""
    return _icp(source, target, cfg, POINT_TO_POINT)


def register_point_to_plane(source: PointCloud, target: PointCloud, cfg: IcpConfig) -> IcpResult:
    """Estimate ``target_from_source`` minimising distances along target normals."""
    return _icp(source, target, cfg, POINT_TO_PLANE)


def register(source: PointCloud, target: PointCloud, cfg: IcpConfig) -> IcpResult:
    return _icp(source, target, cfg, cfg.method)
