"""Dataset directory format and the synthetic box-world generator.

Layout::

    <dir>/manifest.json     intrinsics, depth_scale, mount (16 row-major numbers), rates
    <dir>/poses.csv         timestamp_us,tx,ty,tz,qx,qy,qz,qw   (tracker stream)
    <dir>/groundtruth.csv   same schema, synthetic only, noise free
    <dir>/depth/<timestamp_us>.pgm   16-bit binary PGM (big-endian samples)
"""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
import tempfile
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .depth import CameraIntrinsics, DepthImage
from .errors import CorruptHeader, DatasetError, InconsistentDims, InvalidScene, MissingFile
from .geometry import SE3, Pose, compose, from_quaternion_translation, inverse, rotvec_to_matrix, to_quaternion

MAX_RENDER_DEPTH = 10.0
POSE_HEADER = ["timestamp_us", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


@dataclass
class DatasetManifest:
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.from_fov)
    mount: SE3 = field(default_factory=SE3.identity)
    pose_rate: float = 200.0
    depth_rate: float = 30.0
    frame_count: int | None = None

    def __post_init__(self):
        if not (self.pose_rate > 0 and self.depth_rate > 0):
            raise ValueError("stream rates must be positive")
        if self.pose_rate < self.depth_rate:
            raise ValueError("pose rate must be at least the depth rate")

    def to_json(self) -> dict:
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "depth_scale": self.intrinsics.depth_scale,
            "mount": [float(v) for v in self.mount.matrix().reshape(-1)],
            "pose_rate_hz": self.pose_rate,
            "depth_rate_hz": self.depth_rate,
            "frame_count": self.frame_count,
        }

    @classmethod
    def from_json(cls, d: dict) -> DatasetManifest:
        k = dict(d["intrinsics"])
        if "depth_scale" in d:
            k["depth_scale"] = d["depth_scale"]
        return cls(
            CameraIntrinsics(**k),
            SE3.from_matrix(d.get("mount", np.eye(4).reshape(-1).tolist())),
            float(d.get("pose_rate_hz", 200.0)),
            float(d.get("depth_rate_hz", 30.0)),
            d.get("frame_count"),
        )


# ---------------------------------------------------------------- scene

@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.lo, self.hi)):
            raise InvalidScene(f"box min {self.lo} must be below max {self.hi}")

    def contains(self, p, margin: float = 0.0) -> bool:
        return all(l - margin <= c <= h + margin for l, c, h in zip(self.lo, p, self.hi))


@dataclass(frozen=True)
class Waypoint:
    time: float  # seconds
    position: tuple
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0


@dataclass
class SceneSpec:
    room: Box
    obstacles: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    depth_noise: float = 0.0
    pose_noise_translation: float = 0.0
    pose_noise_rotation: float = 0.0

    def validate(self) -> None:
        for ob in self.obstacles:
            if not (self.room.contains(ob.lo) and self.room.contains(ob.hi)):
                raise InvalidScene(f"obstacle {ob} is not inside the room")
        if not self.trajectory:
            raise InvalidScene("trajectory needs at least one waypoint")
        times = [w.time for w in self.trajectory]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidScene("waypoint times must be strictly increasing")
        if self.depth_noise < 0 or self.pose_noise_translation < 0 or self.pose_noise_rotation < 0:
            raise InvalidScene("noise levels must be non-negative")
        # the camera path must stay in free space
        for t in np.linspace(times[0], times[-1], 200):
            p = self.camera_pose(float(t)).translation
            if not self.room.contains(p, margin=-1e-6):
                raise InvalidScene(f"camera leaves the room at t={t:.3f}s")
            if any(ob.contains(p) for ob in self.obstacles):
                raise InvalidScene(f"camera enters an obstacle at t={t:.3f}s")

    @property
    def duration(self) -> float:
        return self.trajectory[-1].time - self.trajectory[0].time

    def camera_pose(self, t: float) -> SE3:
        """World pose of the depth camera (x right, y down, z forward) at time ``t``.

        Position, yaw and pitch are interpolated linearly per segment, i.e.
        constant linear and angular velocity between waypoints.
        """
        wps = self.trajectory
        if t <= wps[0].time or len(wps) == 1:
            a, b, s = wps[0], wps[0], 0.0
        elif t >= wps[-1].time:
            a, b, s = wps[-1], wps[-1], 0.0
        else:
            i = max(j for j in range(len(wps) - 1) if wps[j].time <= t)
            a, b = wps[i], wps[i + 1]
            s = (t - a.time) / (b.time - a.time)
        pos = (1 - s) * np.asarray(a.position, dtype=float) + s * np.asarray(b.position, dtype=float)
        yaw = math.radians((1 - s) * a.yaw_deg + s * b.yaw_deg)
        pitch = math.radians((1 - s) * a.pitch_deg + s * b.pitch_deg)
        return SE3(camera_rotation(yaw, pitch), pos)

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        try:
            room = Box(tuple(d["room"]["min"]), tuple(d["room"]["max"]))
            obstacles = [Box(tuple(o["min"]), tuple(o["max"])) for o in d.get("obstacles", [])]
            traj = [Waypoint(float(w["t"]), tuple(w["position"]), float(w.get("yaw_deg", 0.0)),
                             float(w.get("pitch_deg", 0.0))) for w in d["trajectory"]]
        except (KeyError, TypeError) as exc:
            raise InvalidScene(f"malformed scene description: {exc}") from exc
        noise = d.get("pose_noise", {})
        return cls(room, obstacles, traj, float(d.get("depth_noise", 0.0)),
                   float(noise.get("translation", 0.0)), float(noise.get("rotation", 0.0)))


def camera_rotation(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """World-from-camera rotation for a camera looking along heading ``yaw`` (z up world)."""
    cy, sy, cp, sp = math.cos(yaw), math.sin(yaw), math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * cy, cp * sy, sp])
    right = np.array([sy, -cy, 0.0])
    down = np.cross(forward, right)
    return np.column_stack([right, down, forward])


def load_scene(path) -> tuple[SceneSpec, DatasetManifest]:
    """Scene JSON; optional ``camera``/``rates``/``mount`` keys fill the manifest."""
    with open(path) as fh:
        d = json.load(fh)
    spec = SceneSpec.from_dict(d)
    cam = d.get("camera", {})
    intr = CameraIntrinsics.from_fov(int(cam.get("width", 640)), int(cam.get("height", 480)),
                                     float(cam.get("hfov_deg", 87.0)), float(cam.get("depth_scale", 0.001)))
    mount = SE3.from_matrix(d["mount"]) if "mount" in d else SE3.identity()
    manifest = DatasetManifest(intr, mount, float(d.get("pose_rate_hz", 200.0)),
                               float(d.get("depth_rate_hz", 30.0)), d.get("frame_count"))
    return spec, manifest


# ---------------------------------------------------------------- rendering

@lru_cache(maxsize=8)
def _pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0:k.height, 0:k.width]
    rays = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u, dtype=float)], axis=-1).reshape(-1, 3)
    rays.setflags(write=False)
    return rays


def _slab(origin: np.ndarray, inv_dirs: np.ndarray, box: Box) -> tuple[np.ndarray, np.ndarray]:
    """Entry and exit ray parameters against an axis-aligned box (slab method)."""
    tn = np.full(len(inv_dirs), -np.inf)
    tf = np.full(len(inv_dirs), np.inf)
    for a in range(3):
        inv = inv_dirs[:, a]
        t1 = (box.lo[a] - origin[a]) * inv
        t2 = (box.hi[a] - origin[a]) * inv
        # a ray parallel to the slab and lying on its plane gives nan; treat as unbounded
        np.fmax(tn, np.fmin(t1, t2), out=tn)
        np.fmin(tf, np.fmax(t1, t2), out=tf)
    return tn, tf


def render_depth_z(spec: SceneSpec, k: CameraIntrinsics, world_from_camera: SE3) -> np.ndarray:
    """Exact optical-axis depth in meters per pixel (inf where nothing is hit)."""
    dirs = _pixel_rays(k) @ world_from_camera.rotation.T
    origin = world_from_camera.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    # camera-frame ray direction has unit z, so the ray parameter is the depth
    _, z = _slab(origin, inv, spec.room)
    for ob in spec.obstacles:
        tn, tf = _slab(origin, inv, ob)
        hit = (tn <= tf) & (tn > 0)
        z = np.where(hit & (tn < z), tn, z)
    z = np.where(np.isfinite(z) & (z > 0), z, np.inf)
    return z.reshape(k.height, k.width)


def render_depth(spec: SceneSpec, k: CameraIntrinsics, world_from_camera: SE3, timestamp: int,
                 rng: np.random.Generator | None = None) -> DepthImage:
    z = render_depth_z(spec, k, world_from_camera)
    if rng is not None and spec.depth_noise > 0:
        z = z + rng.normal(0.0, spec.depth_noise, size=z.shape)
    raw = np.floor(z / k.depth_scale + 0.5)
    raw[~np.isfinite(z) | (z > MAX_RENDER_DEPTH) | (raw <= 0) | (raw > 65535)] = 0
    return DepthImage(raw.astype(np.uint16), timestamp, k)


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    poses: list
    depths: list
    groundtruth: list  # noise-free tracker poses at every pose and depth timestamp

    def groundtruth_lookup(self) -> dict:
        return {p.timestamp: p.transform for p in self.groundtruth}


def _stamps(rate: float, duration: float) -> list[int]:
    n = int(math.floor(duration * rate + 1e-9)) + 1
    return [int(round(i * 1e6 / rate)) for i in range(n)]


def generate_synthetic(spec: SceneSpec, manifest: DatasetManifest, seed: int, out=None,
                       overwrite: bool = False) -> SyntheticDataset:
    """Render depth frames and sample tracker poses along the scene trajectory.

    Deterministic in ``seed``: each frame and pose draws from its own RNG
    stream keyed by (seed, stream, index).  When ``out`` is given the dataset
    is also written there.
    """
    spec.validate()
    k = manifest.intrinsics
    t0 = spec.trajectory[0].time
    if manifest.frame_count is not None:
        depth_ts = [int(round(i * 1e6 / manifest.depth_rate)) for i in range(int(manifest.frame_count))]
    else:
        depth_ts = _stamps(manifest.depth_rate, spec.duration)
    span = (depth_ts[-1] / 1e6 if depth_ts else spec.duration)
    # poses run one period past the last depth frame so every frame has a successor pose
    pose_ts = _stamps(manifest.pose_rate, span + 1.0 / manifest.pose_rate)
    mount_inv = inverse(manifest.mount)

    def tracker_at(ts: int) -> SE3:
        return compose(spec.camera_pose(t0 + ts / 1e6), mount_inv)

    poses = []
    for i, ts in enumerate(pose_ts):
        truth = tracker_at(ts)
        if spec.pose_noise_translation > 0 or spec.pose_noise_rotation > 0:
            rng = np.random.default_rng([seed, 1, i])
            dt = rng.normal(0.0, spec.pose_noise_translation, 3)
            dr = rotvec_to_matrix(rng.normal(0.0, spec.pose_noise_rotation, 3))
            truth = SE3(truth.rotation @ dr, truth.translation + dt)
        poses.append(Pose(ts, truth))
    depths = [
        render_depth(spec, k, spec.camera_pose(t0 + ts / 1e6), ts, np.random.default_rng([seed, 2, i]))
        for i, ts in enumerate(depth_ts)
    ]
    gt = [Pose(ts, tracker_at(ts)) for ts in sorted(set(pose_ts) | set(depth_ts))]
    done = DatasetManifest(k, manifest.mount, manifest.pose_rate, manifest.depth_rate, len(depths))
    ds = SyntheticDataset(done, poses, depths, gt)
    if out is not None:
        save(done, poses, depths, out, overwrite=overwrite, groundtruth=gt)
    return ds


# ---------------------------------------------------------------- files

def write_pgm16(path, values: np.ndarray) -> None:
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(values.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    name = Path(path).name
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptHeader(f"{name}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    try:
        magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise CorruptHeader(f"{name}: non-numeric PGM header field") from exc
    if magic != b"P5" or maxval != 65535 or w <= 0 or h <= 0:
        raise CorruptHeader(f"{name}: expected 16-bit P5 PGM, got {magic!r} maxval {maxval}")
    need = w * h * 2
    if len(data) - pos != need:
        raise CorruptHeader(f"{name}: raster has {len(data) - pos} bytes, header implies {need}")
    return np.frombuffer(data, dtype=">u2", count=w * h, offset=pos).reshape(h, w).astype(np.uint16)


def write_pose_csv(path, poses: Sequence[Pose]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_HEADER)
        for p in poses:
            vals = (*p.transform.translation, *to_quaternion(p.transform))
            w.writerow([p.timestamp, *(repr(float(v)) for v in vals)])


def read_pose_csv(path) -> list[Pose]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"missing {path.name}")
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if next(r, None) != POSE_HEADER:
            raise CorruptHeader(f"{path.name}: unexpected header")
        for line_no, row in enumerate(r, start=2):
            try:
                vals = [float(v) for v in row[1:8]]
                out.append(Pose(int(row[0]), from_quaternion_translation(vals[3:], vals[:3])))
            except (ValueError, IndexError) as exc:
                raise CorruptHeader(f"{path.name}:{line_no}: {exc}") from exc
    out.sort(key=lambda p: p.timestamp)
    return out


def save(manifest: DatasetManifest, poses: Sequence[Pose], depths: Sequence[DepthImage], path,
         overwrite: bool = False, groundtruth: Sequence[Pose] | None = None) -> None:
    """Write a dataset directory atomically (temporary sibling, then rename)."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise DatasetError(f"{path} exists; pass overwrite=True to replace it")
    k = manifest.intrinsics
    for d in depths:
        if d.intrinsics != k:
            raise DatasetError(f"depth frame {d.timestamp} intrinsics differ from the manifest")
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
        (tmp / "depth").mkdir()
        m = manifest.to_json()
        m["frame_count"] = len(depths)
        (tmp / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        write_pose_csv(tmp / "poses.csv", poses)
        if groundtruth is not None:
            write_pose_csv(tmp / "groundtruth.csv", groundtruth)
        for d in depths:
            write_pgm16(tmp / "depth" / f"{d.timestamp}.pgm", d.values)
        if path.exists():
            old = Path(tempfile.mkdtemp(prefix=f".{path.name}.old.", dir=path.parent))
            os.replace(path, old / "data")
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except OSError as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"failed to write dataset {path}: {exc}") from exc


def load(path) -> tuple[DatasetManifest, list[Pose], list[DepthImage]]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise MissingFile(f"{path}: missing manifest.json")
    try:
        manifest = DatasetManifest.from_json(json.loads(mpath.read_text()))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeader(f"manifest.json: {exc}") from exc
    poses = read_pose_csv(path / "poses.csv")
    ddir = path / "depth"
    if not ddir.is_dir():
        raise MissingFile(f"{path}: missing depth/ directory")
    files = []
    for f in ddir.iterdir():
        if f.suffix == ".pgm":
            try:
                files.append((int(f.stem), f))
            except ValueError as exc:
                raise CorruptHeader(f"{f.name}: file name is not a timestamp") from exc
    files.sort()
    k = manifest.intrinsics
    depths = []
    for ts, f in files:
        raw = read_pgm16(f)
        if raw.shape != (k.height, k.width):
            raise InconsistentDims(f"{f.name}: {raw.shape[1]}x{raw.shape[0]} but manifest says {k.width}x{k.height}")
        depths.append(DepthImage(raw, ts, k))
    if manifest.frame_count is not None and manifest.frame_count != len(depths):
        raise InconsistentDims(f"manifest lists {manifest.frame_count} frames, found {len(depths)}")
    return manifest, poses, depths


def load_groundtruth(path) -> list[Pose] | None:
    f = Path(path) / "groundtruth.csv"
    return read_pose_csv(f) if f.exists() else None
