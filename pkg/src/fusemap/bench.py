"""Parameter sweeps over the registration pipeline and their CSV/SVG reports."""

from __future__ import annotations

import csv
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from html import escape
from pathlib import Path

import numpy as np

from . import dataset as ds
from .depth import prepare_cloud
from .errors import FusemapError, PipelineError, ValidationError
from .geometry import SE3, compose, relative, transform_error
from .registration import METHODS, POINT_TO_PLANE, IcpConfig, register
from .sync import DEFAULT_MAX_OFFSET_US, pair_streams, select_keyframes

SWEEP_VARIABLES = ("init_mode", "method", "max_pair_distance", "decimation_factor",
                   "keyframe_interval", "voxel_size")
DEFAULT_FIXED = {
    "init_mode": "odometry_prior",
    "method": POINT_TO_PLANE,
    "max_pair_distance": 0.05,
    "decimation_factor": 4,
    "keyframe_interval": 1.0,
    "voxel_size": 0.0,
    "max_iterations": 50,
    "normal_k": 30,
    "max_offset_us": DEFAULT_MAX_OFFSET_US,
}
COLUMNS = ["variable", "value", "pair", "fitness", "inlier_rmse", "iterations", "elapsed_s",
           "trans_err_m", "rot_err_deg"]
_FLOAT_COLS = ("fitness", "inlier_rmse", "iterations", "elapsed_s", "trans_err_m", "rot_err_deg")


def _default_workers() -> int:
    try:
        import psutil

        return psutil.cpu_count(logical=False) or 1
    except ImportError:  # pragma: no cover
        import os

        return os.cpu_count() or 1


@dataclass
class SweepSpec:
    dataset: str
    variable: str
    values: list
    fixed: dict = field(default_factory=dict)
    repetitions: int = 5
    workers: int | None = None

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValidationError(f"sweep variable must be one of {SWEEP_VARIABLES}, got {self.variable!r}")
        if not self.values:
            raise ValidationError("sweep value list is empty")
        if self.repetitions < 1:
            raise ValidationError("repetitions must be >= 1")
        unknown = set(self.fixed) - set(DEFAULT_FIXED)
        if unknown:
            raise ValidationError(f"unknown fixed settings: {sorted(unknown)}")
        for v in self.values:
            self.config_for(v)

    @classmethod
    def from_file(cls, path, **overrides) -> SweepSpec:
        path = Path(path)
        d = json.loads(path.read_text())
        dset = Path(d["dataset"])
        if not dset.is_absolute():
            dset = path.parent / dset
        d["dataset"] = str(dset)
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)

    def config_for(self, value) -> dict:
        cfg = {**DEFAULT_FIXED, **self.fixed, self.variable: value}
        if cfg["init_mode"] not in ("identity", "odometry_prior"):
            raise ValidationError(f"bad init_mode {cfg['init_mode']!r}")
        if cfg["method"] not in METHODS:
            raise ValidationError(f"bad method {cfg['method']!r}")
        if cfg["decimation_factor"] not in (1, 2, 4, 8):
            raise ValidationError(f"bad decimation_factor {cfg['decimation_factor']!r}")
        if not float(cfg["max_pair_distance"]) > 0 or float(cfg["keyframe_interval"]) < 0 \
                or float(cfg["voxel_size"]) < 0:
            raise ValidationError(f"bad numeric setting for value {value!r}")
        return cfg


def _run_value(spec: SweepSpec, value, loaded=None) -> list[dict]:
    cfg = spec.config_for(value)
    manifest, poses, depths = loaded if loaded is not None else ds.load(spec.dataset)
    gt_poses = ds.load_groundtruth(spec.dataset)
    gt = {p.timestamp: p.transform for p in gt_poses} if gt_poses else None
    framesets, _ = pair_streams(poses, depths, int(cfg["max_offset_us"]))
    keys = select_keyframes(framesets, float(cfg["keyframe_interval"]))
    if len(keys) < 2:
        raise PipelineError(f"fewer than two keyframes for value {value!r}")
    mount = manifest.mount
    need_normals = cfg["method"] == POINT_TO_PLANE
    clouds = [prepare_cloud(k.depth, int(cfg["decimation_factor"]), float(cfg["voxel_size"]),
                            normals=need_normals, normal_k=int(cfg["normal_k"])) for k in keys]
    rows = []
    for i in range(1, len(keys)):
        a, b = keys[i - 1], keys[i]
        if cfg["init_mode"] == "odometry_prior":
            init = relative(compose(a.pose.transform, mount), compose(b.pose.transform, mount))
        else:
            init = SE3.identity()
        icp = IcpConfig(cfg["method"], float(cfg["max_pair_distance"]), int(cfg["max_iterations"]), init=init)
        times = []
        first = None
        for _ in range(spec.repetitions):
            res = register(clouds[i], clouds[i - 1], icp)
            first = first or res
            times.append(res.elapsed)
        err_t = err_r = float("nan")
        if gt is not None and a.timestamp in gt and b.timestamp in gt:
            truth = relative(compose(gt[a.timestamp], mount), compose(gt[b.timestamp], mount))
            err_t, err_r = transform_error(first.transform, truth)
        rows.append({
            "variable": spec.variable, "value": value, "pair": str(i - 1),
            "fitness": first.fitness, "inlier_rmse": first.inlier_rmse,
            "iterations": float(first.iterations), "elapsed_s": statistics.median(times),
            "trans_err_m": err_t, "rot_err_deg": err_r,
        })
    agg = {"variable": spec.variable, "value": value, "pair": "mean"}
    for c in _FLOAT_COLS:
        agg[c] = float(np.mean([r[c] for r in rows]))
    rows.append(agg)
    return rows


def run_sweep(spec: SweepSpec) -> list[dict]:
    """One row per (value, keyframe pair) plus a ``pair == "mean"`` row per value.

    Metric columns are deterministic; ``elapsed_s`` is the median over
    repetitions.  Output order follows ``spec.values`` regardless of which
    worker finishes first.
    """
    workers = spec.workers or _default_workers()
    out: list[dict] = []
    if workers <= 1 or len(spec.values) == 1:
        loaded = ds.load(spec.dataset)
        for v in spec.values:
            try:
                out.extend(_run_value(spec, v, loaded))
            except FusemapError as exc:
                raise PipelineError(f"sweep value {v!r}: {exc}") from exc
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_value, spec, v) for v in spec.values]
        for v, fut in zip(spec.values, futures):
            try:
                out.extend(fut.result())
            except FusemapError as exc:
                raise PipelineError(f"sweep value {v!r}: {exc}") from exc
    return out


def aggregate_rows(rows: list[dict]) -> list[dict]:
    return [r for r in rows if r["pair"] == "mean"]


# ---------------------------------------------------------------- report

def write_results_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({c: repr(r[c]) if c in _FLOAT_COLS else r[c] for c in COLUMNS})


def _parse_value(s: str):
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            r = dict(r)
            r["value"] = _parse_value(r["value"])
            for c in _FLOAT_COLS:
                r[c] = float(r[c])
            rows.append(r)
        return rows


def svg_chart(labels: list[str], values: list[float], title: str, ylabel: str,
              width: int = 480, height: int = 320) -> str:
    """Minimal self-contained line chart with categorical x positions."""
    ml, mr, mt, mb = 64, 16, 32, 48
    pw, ph = width - ml - mr, height - mt - mb
    finite = [v for v in values if np.isfinite(v)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi - lo <= 0:
        lo, hi = lo - 0.5 * (abs(lo) or 1.0), hi + 0.5 * (abs(hi) or 1.0)
    n = len(values)

    def xy(i, v):
        x = ml + (pw / 2 if n == 1 else pw * i / (n - 1))
        return x, mt + ph * (1 - (v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="14" y="{mt + ph / 2:.1f}" transform="rotate(-90 14 {mt + ph / 2:.1f})" '
        f'text-anchor="middle">{escape(ylabel)}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        v = lo + frac * (hi - lo)
        y = mt + ph * (1 - frac)
        parts.append(f'<text x="{ml - 4}" y="{y + 4:.1f}" text-anchor="end">{v:.4g}</text>')
    pts = [xy(i, v) for i, v in enumerate(values) if np.isfinite(v)]
    if len(pts) > 1:
        path = " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="#1f5fbf" stroke-width="2"/>')
    for i, (lab, v) in enumerate(zip(labels, values)):
        x, _ = xy(i, lo)
        parts.append(f'<text x="{x:.1f}" y="{mt + ph + 16}" text-anchor="middle">{escape(str(lab))}</text>')
        if np.isfinite(v):
            _, y = xy(i, v)
            parts.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="3.5" fill="#bf1f1f"/>')
            parts.append(f'<text x="{x:.1f}" y="{y - 7:.1f}" text-anchor="middle">{v:.4g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(rows: list[dict], out_dir) -> list[Path]:
    """Write ``results.csv`` and rmse/fitness/time SVG charts of the per-value means."""
    if not rows:
        raise ValidationError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "results.csv"]
    write_results_csv(rows, written[0])
    agg = aggregate_rows(rows)
    var = agg[0]["variable"] if agg else rows[0]["variable"]
    labels = [str(r["value"]) for r in agg]
    for key, name, ylabel in (("inlier_rmse", "rmse", "inlier RMSE [m]"),
                              ("fitness", "fitness", "fitness"),
                              ("elapsed_s", "time", "registration time [s]")):
        p = out / f"{name}.svg"
        p.write_text(svg_chart(labels, [r[key] for r in agg], f"{ylabel} vs {var}", ylabel))
        written.append(p)
    return written
