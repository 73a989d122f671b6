"""Command line entry point; one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation error, 2 pipeline/registration error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from . import bench, dataset
from .depth import prepare_cloud
from .errors import DatasetError, PipelineError, ValidationError
from .geometry import SE3, compose, relative, to_quaternion, transform_error
from .occupancy import (
    OccupancyOctree,
    build_map,
    colormap_blue_red,
    export_voxels,
    fuse_clouds,
    height_colors,
    write_ply,
    write_voxel_csv,
)
from .registration import POINT_TO_PLANE, POINT_TO_POINT, IcpConfig, register
from .sync import DEFAULT_MAX_OFFSET_US, pair_streams, select_keyframes
from .trajectory import Trajectory, compare, icp_trajectory, odometry_trajectory

log = logging.getLogger("fusemap")

METHOD_NAMES = {"p2p": POINT_TO_POINT, "p2l": POINT_TO_PLANE}
INIT_NAMES = {"identity": "identity", "odometry": "odometry_prior"}


def _paired(path, max_offset):
    manifest, poses, depths = dataset.load(path)
    framesets, stats = pair_streams(poses, depths, max_offset)
    return manifest, framesets, stats


def _groundtruth_depth_poses(path, mount, stamps):
    gt = dataset.load_groundtruth(path)
    if gt is None:
        return None
    lookup = {p.timestamp: p.transform for p in gt}
    if not all(t in lookup for t in stamps):
        return None
    return [compose(lookup[t], mount) for t in stamps]


def cmd_synth(args) -> int:
    spec, manifest = dataset.load_scene(args.scene)
    if args.frames is not None:
        manifest.frame_count = args.frames
    ds = dataset.generate_synthetic(spec, manifest, args.seed, out=args.out, overwrite=args.overwrite)
    print(json.dumps({"out": str(args.out), "depth_frames": len(ds.depths), "poses": len(ds.poses)}))
    return 0


def cmd_sync(args) -> int:
    _, framesets, stats = _paired(args.dataset, args.max_offset_us)
    if args.interval is not None:
        framesets = select_keyframes(framesets, args.interval)
    if args.stats:
        print(json.dumps({"paired": stats.paired, "dropped": stats.dropped,
                          "max_abs_offset_us": stats.max_abs_offset,
                          "mean_abs_offset_us": stats.mean_abs_offset,
                          "selected": len(framesets)}))
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["index", "depth_timestamp_us", "pose_timestamp_us", "offset_us"])
        for i, fs in enumerate(framesets):
            w.writerow([i, fs.timestamp, fs.pose.timestamp, fs.time_offset])
    return 0


def cmd_align(args) -> int:
    manifest, framesets, _ = _paired(args.dataset, args.max_offset_us)
    n = len(framesets)
    for idx in (args.frame_a, args.frame_b):
        if not 0 <= idx < n:
            raise ValidationError(f"frame index {idx} out of range (0..{n - 1})")
    a, b = framesets[args.frame_a], framesets[args.frame_b]
    method = METHOD_NAMES[args.method]
    wa = compose(a.pose.transform, manifest.mount)
    wb = compose(b.pose.transform, manifest.mount)
    init = relative(wa, wb) if args.init == "odometry" else SE3.identity()
    normals = method == POINT_TO_PLANE
    src = prepare_cloud(b.depth, args.decimate, args.voxel, normals=normals)
    tgt = prepare_cloud(a.depth, args.decimate, args.voxel, normals=normals)
    res = register(src, tgt, IcpConfig(method, args.max_dist, args.max_iterations, init=init))
    report = {
        "frame_a": args.frame_a, "frame_b": args.frame_b, "method": method, "init": args.init,
        "fitness": res.fitness, "inlier_rmse": res.inlier_rmse, "iterations": res.iterations,
        "elapsed_s": res.elapsed, "source_points": len(src), "target_points": len(tgt),
        "translation": res.transform.translation.tolist(),
        "quaternion_xyzw": to_quaternion(res.transform).tolist(),
    }
    gt = _groundtruth_depth_poses(args.dataset, manifest.mount, [a.timestamp, b.timestamp])
    if gt is not None:
        et, er = transform_error(res.transform, relative(gt[0], gt[1]))
        report.update(trans_err_m=et, rot_err_deg=er)
    print(json.dumps(report))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_a", "frame_b", "tx", "ty", "tz", "qx", "qy", "qz", "qw",
                        "fitness", "inlier_rmse", "iterations"])
            vals = [*res.transform.translation, *to_quaternion(res.transform), res.fitness, res.inlier_rmse]
            w.writerow([args.frame_a, args.frame_b, *(f"{v:.9g}" for v in vals), res.iterations])
    return 0


def cmd_trajectory(args) -> int:
    manifest, framesets, _ = _paired(args.dataset, args.max_offset_us)
    keys = select_keyframes(framesets, args.interval)
    if args.source == "odometry":
        traj = odometry_trajectory(keys, manifest.mount)
        summary = {"poses": len(traj)}
    else:
        cfg = IcpConfig(METHOD_NAMES[args.method], args.max_dist, args.max_iterations)
        traj, results = icp_trajectory(keys, manifest.mount, cfg, INIT_NAMES[args.init],
                                       args.decimate, args.voxel)
        summary = {"poses": len(traj), "mean_iterations": float(np.mean([r.iterations for r in results])),
                   "mean_fitness": float(np.mean([r.fitness for r in results])),
                   "mean_inlier_rmse": float(np.mean([r.inlier_rmse for r in results]))}
    traj.save_csv(args.out)
    gt = _groundtruth_depth_poses(args.dataset, manifest.mount, traj.timestamps)
    if gt is not None:
        st = compare(Trajectory(traj.timestamps, gt), traj)
        summary.update(ate_rmse_m=st.ate_rmse, max_error_m=st.max_error, path_length_m=st.path_length)
    print(json.dumps(summary))
    return 0


def cmd_map(args) -> int:
    manifest, framesets, _ = _paired(args.dataset, args.max_offset_us)
    traj = Trajectory.load_csv(args.trajectory)
    by_ts = {fs.timestamp: fs for fs in framesets}
    missing = [t for t in traj.timestamps if t not in by_ts]
    if missing:
        raise ValidationError(f"trajectory timestamps not among paired depth frames: {missing[:5]}")
    keys = [by_ts[t] for t in traj.timestamps]
    tree = OccupancyOctree(resolution=args.resolution)
    build_map(keys, traj, tree, max_range=args.max_range, carve_free=args.carve_free,
              decimation_factor=args.decimate)
    voxels = export_voxels(tree)
    if args.out_ply:
        write_ply(args.out_ply, voxels.centers, colormap_blue_red(voxels.colors))
    if args.out_voxels:
        write_voxel_csv(args.out_voxels, voxels)
    if args.out_cloud:
        cloud = fuse_clouds(keys, traj, args.cloud_voxel, args.decimate)
        write_ply(args.out_cloud, cloud.points, colormap_blue_red(height_colors(cloud.points[:, 2])))
    print(json.dumps({"keyframes": len(keys), "occupied_voxels": len(voxels), "leaves": len(tree.leaves)}))
    return 0


def cmd_bench(args) -> int:
    spec = bench.SweepSpec.from_file(args.sweep, repetitions=args.reps, workers=args.workers)
    rows = bench.run_sweep(spec)
    files = bench.emit_report(rows, args.out)
    print(json.dumps({"rows": len(rows), "files": [str(f) for f in files]}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fusemap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def offset(sp):
        sp.add_argument("--max-offset-us", type=int, default=DEFAULT_MAX_OFFSET_US)

    def icp_opts(sp):
        sp.add_argument("--method", choices=sorted(METHOD_NAMES), default="p2l")
        sp.add_argument("--max-dist", type=float, default=0.05)
        sp.add_argument("--max-iterations", type=int, default=50)
        sp.add_argument("--decimate", type=int, choices=(1, 2, 4, 8), default=4)
        sp.add_argument("--voxel", type=float, default=0.0)

    sp = sub.add_parser("synth", help="render a synthetic dataset from a scene file")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=None, help="depth frame count (default: whole trajectory)")
    sp.add_argument("--overwrite", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("sync", help="pair depth frames with poses")
    sp.add_argument("--dataset", required=True)
    offset(sp)
    sp.add_argument("--interval", type=float, default=None, help="keyframe interval in seconds")
    sp.add_argument("--stats", action="store_true")
    sp.set_defaults(func=cmd_sync)

    sp = sub.add_parser("align", help="register two paired frames")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--frame-a", type=int, required=True, help="target frame index")
    sp.add_argument("--frame-b", type=int, required=True, help="source frame index")
    sp.add_argument("--init", choices=sorted(INIT_NAMES), default="odometry")
    sp.add_argument("--out", default=None, help="CSV with transform and metrics")
    icp_opts(sp)
    offset(sp)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("trajectory", help="odometry or ICP-chained keyframe trajectory")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--source", choices=("odometry", "icp"), default="odometry")
    sp.add_argument("--init", choices=sorted(INIT_NAMES), default="odometry")
    sp.add_argument("--interval", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    icp_opts(sp)
    offset(sp)
    sp.set_defaults(func=cmd_trajectory)

    sp = sub.add_parser("map", help="occupancy map from a dataset and a trajectory")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--trajectory", required=True)
    sp.add_argument("--resolution", type=float, default=0.05)
    sp.add_argument("--max-range", type=float, default=10.0)
    sp.add_argument("--carve-free", action="store_true")
    sp.add_argument("--decimate", type=int, choices=(1, 2, 4, 8), default=4)
    sp.add_argument("--out-ply", default=None)
    sp.add_argument("--out-voxels", default=None)
    sp.add_argument("--out-cloud", default=None, help="fused point cloud PLY")
    sp.add_argument("--cloud-voxel", type=float, default=0.01)
    offset(sp)
    sp.set_defaults(func=cmd_map)

    sp = sub.add_parser("bench", help="parameter sweep with CSV/SVG report")
    sp.add_argument("--sweep", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--reps", type=int, default=None)
    sp.add_argument("--workers", type=int, default=None)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except PipelineError as exc:
        log.error("%s", exc)
        return 2
    except (DatasetError, OSError) as exc:
        log.error("%s", exc)
        return 3
    except ValueError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
