import dataclasses
import hashlib
import json

import numpy as np
import pytest

from conftest import room_scene
from fusemap import dataset as ds
from fusemap.dataset import Box, DatasetManifest, SceneSpec, Waypoint, generate_synthetic, load, save
from fusemap.depth import CameraIntrinsics, DepthImage, deproject
from fusemap.errors import CorruptHeader, DatasetError, InconsistentDims, InvalidScene, MissingFile
from fusemap.geometry import SE3, Pose, apply, compose, random_se3, relative
from oracles import box_surface_distance


def tree_digest(path):
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(path)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def short_manifest(frames=3, width=80, height=60):
    return DatasetManifest(CameraIntrinsics.from_fov(width, height), frame_count=frames)


def test_stationary_noiseless_frames_identical():
    spec = room_scene(trajectory=[Waypoint(0, (0, 0, 1.2), 30.0)])
    data = generate_synthetic(spec, short_manifest(5), seed=3)
    assert len(data.depths) == 5
    for d in data.depths[1:]:
        assert np.array_equal(d.values, data.depths[0].values)


def test_wall_two_metres_ahead():
    # camera at x=1 looking along +x at the wall x=3: a fronto-parallel plane has constant z-depth
    spec = SceneSpec(Box((-3, -2.5, 0), (3, 2.5, 2.8)), [], [Waypoint(0, (1.0, 0, 1.4), 0.0)])
    k = CameraIntrinsics.from_fov(64, 48)
    img = ds.render_depth(spec, k, spec.camera_pose(0), 0)
    assert img.values[24, 32] == 2000
    assert img.values[23, 31] == 2000


def test_same_seed_is_byte_identical(tmp_path):
    spec = room_scene(depth_noise=0.003, pose_noise_translation=0.001, pose_noise_rotation=0.001)
    generate_synthetic(spec, short_manifest(4), seed=11, out=tmp_path / "a")
    generate_synthetic(spec, short_manifest(4), seed=11, out=tmp_path / "b")
    generate_synthetic(spec, short_manifest(4), seed=12, out=tmp_path / "c")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_layout_and_round_trip(tmp_path):
    spec = room_scene(depth_noise=0.002)
    manifest = dataclasses.replace(short_manifest(6), mount=random_se3(np.random.default_rng(0), 0.3, 0.1))
    data = generate_synthetic(spec, manifest, seed=1, out=tmp_path / "d")
    root = tmp_path / "d"
    assert {p.name for p in root.iterdir()} == {"manifest.json", "poses.csv", "groundtruth.csv", "depth"}
    assert sorted(p.name for p in (root / "depth").iterdir()) == sorted(f"{d.timestamp}.pgm" for d in data.depths)
    m = json.loads((root / "manifest.json").read_text())
    assert len(m["mount"]) == 16 and m["depth_scale"] == 0.001
    assert (root / "poses.csv").read_text().splitlines()[0] == "timestamp_us,tx,ty,tz,qx,qy,qz,qw"
    manifest2, poses, depths = load(root)
    assert manifest2.intrinsics == data.manifest.intrinsics
    assert manifest2.mount.allclose(manifest.mount, 1e-12)
    assert (manifest2.pose_rate, manifest2.depth_rate) == (200.0, 30.0)
    assert [d.timestamp for d in depths] == [d.timestamp for d in data.depths]
    for a, b in zip(depths, data.depths):
        assert np.array_equal(a.values, b.values)
    assert [p.timestamp for p in poses] == [p.timestamp for p in data.poses]
    for a, b in zip(poses, data.poses):
        assert a.transform.allclose(b.transform, 1e-12)
    gt = ds.load_groundtruth(root)
    assert {d.timestamp for d in data.depths} <= {p.timestamp for p in gt}


def test_pgm_is_big_endian_16_bit(tmp_path):
    v = np.array([[1, 256], [65535, 0]], dtype=np.uint16)
    ds.write_pgm16(tmp_path / "x.pgm", v)
    data = (tmp_path / "x.pgm").read_bytes()
    assert data == b"P5\n2 2\n65535\n\x00\x01\x01\x00\xff\xff\x00\x00"
    assert np.array_equal(ds.read_pgm16(tmp_path / "x.pgm"), v)


def test_truncated_depth_file_names_the_file(tmp_path):
    generate_synthetic(room_scene(), short_manifest(2), seed=0, out=tmp_path / "d")
    victim = sorted((tmp_path / "d" / "depth").iterdir())[1]
    victim.write_bytes(victim.read_bytes()[:-10])
    with pytest.raises(CorruptHeader, match=victim.name):
        load(tmp_path / "d")
    victim.write_bytes(b"P5\n80")
    with pytest.raises(CorruptHeader, match=victim.name):
        load(tmp_path / "d")


def test_inconsistent_dims(tmp_path):
    generate_synthetic(room_scene(), short_manifest(2), seed=0, out=tmp_path / "d")
    victim = sorted((tmp_path / "d" / "depth").iterdir())[0]
    ds.write_pgm16(victim, np.ones((10, 10), dtype=np.uint16))
    with pytest.raises(InconsistentDims):
        load(tmp_path / "d")


def test_missing_files(tmp_path):
    with pytest.raises(MissingFile):
        load(tmp_path / "nothing")
    generate_synthetic(room_scene(), short_manifest(1), seed=0, out=tmp_path / "d")
    (tmp_path / "d" / "poses.csv").unlink()
    with pytest.raises(MissingFile):
        load(tmp_path / "d")


def test_raw_depth_unit_conversion(tmp_path):
    k = CameraIntrinsics(3, 3, 2.0, 2.0, 1.0, 1.0)
    v = np.zeros((3, 3), dtype=np.uint16)
    v[1, 1] = 1500
    save(DatasetManifest(k), [], [DepthImage(v, 5, k)], tmp_path / "d")
    _, _, depths = load(tmp_path / "d")
    assert np.allclose(deproject(depths[0]).points, [[0, 0, 1.5]])


def test_empty_streams(tmp_path):
    save(DatasetManifest(), [], [], tmp_path / "d")
    manifest, poses, depths = load(tmp_path / "d")
    assert poses == [] and depths == [] and manifest.frame_count == 0


def test_hundred_frames_hundred_files(tmp_path):
    k = CameraIntrinsics(4, 3, 2.0, 2.0, 1.5, 1.0)
    depths = [DepthImage(np.full((3, 4), i, dtype=np.uint16), i * 33_333, k) for i in range(100)]
    poses = [Pose(i * 5000, SE3.identity()) for i in range(700)]
    save(DatasetManifest(k), poses, depths, tmp_path / "d")
    assert len(list((tmp_path / "d" / "depth").iterdir())) == 100


def test_overwrite_requires_flag(tmp_path):
    save(DatasetManifest(), [], [], tmp_path / "d")
    with pytest.raises(DatasetError):
        save(DatasetManifest(), [], [], tmp_path / "d")
    k = CameraIntrinsics(4, 3, 2.0, 2.0, 1.5, 1.0)
    save(DatasetManifest(k), [], [DepthImage(np.ones((3, 4), dtype=np.uint16), 0, k)], tmp_path / "d", overwrite=True)
    assert load(tmp_path / "d")[0].frame_count == 1
    assert [p.name for p in tmp_path.iterdir()] == ["d"]  # no temporaries left behind


@pytest.mark.parametrize("bad", [
    lambda s: dataclasses.replace(s, obstacles=[Box((2.5, 0, 0), (4.0, 1, 1))]),
    lambda s: dataclasses.replace(s, trajectory=[Waypoint(0, (1.4, 1.0, 0.5))]),
    lambda s: dataclasses.replace(s, trajectory=[Waypoint(0, (0, 0, 1)), Waypoint(1, (5, 0, 1))]),
    lambda s: dataclasses.replace(s, trajectory=[]),
    lambda s: dataclasses.replace(s, depth_noise=-1.0),
])
def test_invalid_scenes(bad):
    with pytest.raises(InvalidScene):
        generate_synthetic(bad(room_scene()), short_manifest(1), seed=0)


def test_pose_stream_rates_and_noise_free_truth():
    data = generate_synthetic(room_scene(), short_manifest(10), seed=0)
    ts = [p.timestamp for p in data.poses]
    assert np.all(np.diff(ts) == 5000)
    assert ts[-1] >= data.depths[-1].timestamp
    dts = [d.timestamp for d in data.depths]
    assert dts == [round(i * 1e6 / 30) for i in range(10)]
    gt = data.groundtruth_lookup()
    for p in data.poses:
        assert p.transform.allclose(gt[p.timestamp], 1e-12)


def test_rendered_points_lie_on_surfaces():
    spec = room_scene()
    k = CameraIntrinsics.from_fov(160, 120)
    boxes = [spec.room, *spec.obstacles]
    for t in (0.0, 1.7, 4.0):
        pose = spec.camera_pose(t)
        pc = deproject(ds.render_depth(spec, k, pose, 0))
        world = apply(pose, pc).points
        ray_len = np.linalg.norm(pc.points / pc.points[:, 2:3], axis=1)
        assert np.all(box_surface_distance(world, boxes) <= k.depth_scale / 2 * ray_len + 1e-9)


def test_ground_truth_relatives_align_keyframes():
    spec = room_scene()
    manifest = dataclasses.replace(short_manifest(61, 160, 120), mount=random_se3(np.random.default_rng(5), 0.2, 0.05))
    data = generate_synthetic(spec, manifest, seed=0)
    gt = data.groundtruth_lookup()
    boxes = [spec.room, *spec.obstacles]
    a, b = data.depths[0], data.depths[60]
    wa = compose(gt[a.timestamp], manifest.mount)
    wb = compose(gt[b.timestamp], manifest.mount)
    in_a = apply(relative(wa, wb), deproject(b))
    world = apply(wa, in_a).points
    ray_len = np.linalg.norm(deproject(b).points / deproject(b).points[:, 2:3], axis=1)
    assert np.all(box_surface_distance(world, boxes) <= 0.0005 * ray_len + 1e-9)
