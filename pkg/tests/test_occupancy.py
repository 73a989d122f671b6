import numpy as np
import pytest

from fusemap.cloud import PointCloud
from fusemap.errors import LengthMismatch
from fusemap.geometry import SE3
from fusemap.occupancy import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    OccupancyOctree,
    colormap_blue_red,
    export_voxels,
    fuse_clouds,
    integrate,
    logistic,
    morton_decode,
    morton_encode,
    query,
    read_ply,
    traverse_ray,
    traverse_rays,
    write_ply,
    write_voxel_csv,
)
from fusemap.trajectory import Trajectory
from oracles import segment_box_voxels


def test_morton_round_trip(rng):
    keys = rng.integers(0, 1 << 16, size=(1000, 3))
    assert np.array_equal(morton_decode(morton_encode(keys)), keys)
    assert morton_encode(np.array([[1, 0, 0]]))[0] == 1
    assert morton_encode(np.array([[0, 1, 0]]))[0] == 2
    assert morton_encode(np.array([[0, 0, 1]]))[0] == 4


def test_traversal_axis_aligned_example():
    keys = traverse_ray((0, 0, 0), (1, 0, 0), 0.1)
    assert keys == [(i, 0, 0) for i in range(11)]


def test_traversal_matches_brute_force_on_random_rays(rng):
    origins = rng.uniform(-2, 2, size=(1000, 3))
    ends = origins + rng.normal(size=(1000, 3)) * rng.uniform(0.01, 1.5, size=(1000, 1))
    res = 0.1
    for o, e in zip(origins, ends):
        oracle = segment_box_voxels(o, e, res)
        walk = traverse_ray(o, e, res)
        assert set(walk) == oracle
        assert len(walk) == len(oracle)  # no voxel visited twice
        steps = np.abs(np.diff(np.array(walk), axis=0)).sum(axis=1)
        assert np.all(steps == 1)  # face-connected walk


def test_batched_traversal_matches_single_ray(rng):
    origin = rng.uniform(-1, 1, size=3)
    ends = origin + rng.normal(size=(300, 3))
    ray, keys = traverse_rays(origin, ends, 0.07)
    for i, e in enumerate(ends):
        assert [tuple(k) for k in keys[ray == i]] == traverse_ray(origin, e, 0.07)


def test_integrate_single_ray_example():
    tree = OccupancyOctree(resolution=0.1)
    integrate(tree, PointCloud([[1.0, 0, 0]]), (0, 0, 0), max_range=5, carve_free=True)
    assert query(tree, (1.05, 0.05, 0.05))[0] == OCCUPIED
    free = [i for i in range(-1, 12) if query(tree, (i * 0.1 + 0.05, 0.05, 0.05))[0] == FREE]
    assert free == list(range(1, 10))
    assert query(tree, (0.05, 0.05, 0.05))[0] == UNKNOWN  # sensor voxel itself is not updated
    assert len(tree.leaves) == 10


def test_integrate_without_carving_marks_endpoint_only():
    tree = OccupancyOctree(resolution=0.1)
    integrate(tree, PointCloud([[1.0, 0, 0]]), (0, 0, 0), max_range=5)
    assert len(tree.leaves) == 1
    assert query(tree, (1.05, 0, 0))[0] == OCCUPIED


def test_repeated_hits_clamp_exactly():
    tree = OccupancyOctree(resolution=0.1)
    for _ in range(100):
        integrate(tree, PointCloud([[1.0, 0, 0]]), (0, 0, 0), max_range=5, carve_free=True)
    assert tree.log_odds((1.05, 0, 0)) == tree.l_max
    assert tree.log_odds((0.55, 0, 0)) == tree.l_min


def test_points_beyond_range_are_ignored():
    tree = OccupancyOctree(resolution=0.1)
    integrate(tree, PointCloud([[6.0, 0, 0]]), (0, 0, 0), max_range=5, carve_free=True)
    assert tree.leaves == {}


def test_per_scan_dedup_hit_beats_miss():
    tree = OccupancyOctree(resolution=0.1)
    # the first ray ends in voxel 5; the second passes through it on the way to voxel 10
    cloud = PointCloud([[0.55, 0.05, 0.05], [1.05, 0.05, 0.05], [1.06, 0.05, 0.05]])
    integrate(tree, cloud, (0.05, 0.05, 0.05), max_range=5, carve_free=True)
    assert tree.log_odds((0.55, 0.05, 0.05)) == pytest.approx(tree.l_hit)
    assert tree.log_odds((1.05, 0.05, 0.05)) == pytest.approx(tree.l_hit)
    assert tree.log_odds((0.35, 0.05, 0.05)) == pytest.approx(tree.l_miss)


def test_log_odds_additivity_closed_form():
    tree = OccupancyOctree(resolution=0.1)
    target = PointCloud([[0.55, 0.05, 0.05]])
    through = PointCloud([[1.55, 0.05, 0.05]])
    origin = (0.05, 0.05, 0.05)
    for cloud in (target, through, target, through, through, target, target):
        integrate(tree, cloud, origin, max_range=5, carve_free=True)
    expected = logistic(4 * tree.l_hit + 3 * tree.l_miss)
    state, p = query(tree, (0.55, 0.05, 0.05))
    assert p == pytest.approx(expected, abs=1e-12)
    assert state == OCCUPIED


def test_integration_order_independence(rng):
    a = PointCloud(rng.uniform(-2, 2, size=(300, 3)))
    b = PointCloud(rng.uniform(-2, 2, size=(300, 3)))
    t1, t2 = OccupancyOctree(0.2), OccupancyOctree(0.2)
    integrate(t1, a, (0, 0, 0), 10, carve_free=True)
    integrate(t1, b, (0.3, 0, 0), 10, carve_free=True)
    integrate(t2, b, (0.3, 0, 0), 10, carve_free=True)
    integrate(t2, a, (0, 0, 0), 10, carve_free=True)
    assert t1.leaves == t2.leaves


def test_occupied_leaves_bounded_by_points(rng):
    tree = OccupancyOctree(0.05)
    pts = rng.uniform(-1, 1, size=(500, 3))
    integrate(tree, PointCloud(pts), (0, 0, 0), 10, carve_free=True)
    assert len(export_voxels(tree)) <= len(pts)


def test_log_odds_stay_within_clamps(rng):
    tree = OccupancyOctree(0.1)
    for _ in range(30):
        integrate(tree, PointCloud(rng.uniform(-1, 1, size=(50, 3))), (0, 0, 0), 10, carve_free=True)
    vals = np.array(list(tree.leaves.values()))
    assert vals.min() >= tree.l_min and vals.max() <= tree.l_max
    for level in (1, 3):
        inner = tree.inner_log_odds(level)
        assert max(inner.values()) == vals.max()


def test_query_fresh_tree_unknown():
    assert query(OccupancyOctree(), (1, 2, 3)) == (UNKNOWN, 0.5)


def test_export_empty_and_single():
    assert len(export_voxels(OccupancyOctree())) == 0
    tree = OccupancyOctree(0.1)
    integrate(tree, PointCloud([[0.5, 0.5, 0.5]]), (0, 0, 0), 5)
    vox = export_voxels(tree)
    assert len(vox) == 1 and vox.colors[0] == 0.5
    assert np.allclose(vox.centers, [[0.55, 0.55, 0.55]])


def test_export_colors_follow_height():
    tree = OccupancyOctree(0.1)
    integrate(tree, PointCloud([[0, 0, 0.05], [0, 0, 1.05], [0, 0, 2.05]]), (1, 1, 1), 5)
    vox = export_voxels(tree)
    order = np.argsort(vox.centers[:, 2])
    assert np.allclose(vox.colors[order], [0, 0.5, 1])
    rgb = colormap_blue_red(vox.colors[order])
    assert rgb[0].tolist() == [0, 0, 255] and rgb[2].tolist() == [255, 0, 0]
    assert np.all(np.abs(rgb[1].astype(int) - [128, 0, 128]) <= 1)


def test_tree_parameter_validation():
    with pytest.raises(ValueError):
        OccupancyOctree(p_hit=0.4)
    with pytest.raises(ValueError):
        OccupancyOctree(p_miss=0.6)
    with pytest.raises(ValueError):
        OccupancyOctree(resolution=0)


def test_ply_round_trip(tmp_path, rng):
    pts = rng.uniform(-5, 5, size=(100, 3))
    rgb = rng.integers(0, 256, size=(100, 3)).astype(np.uint8)
    path = tmp_path / "c.ply"
    write_ply(path, pts, rgb)
    data = path.read_bytes()
    header = data[: data.index(b"end_header\n")].decode()
    assert "format binary_little_endian 1.0" in header
    assert "element vertex 100" in header
    for prop in ("float x", "float y", "float z", "uchar red", "uchar green", "uchar blue"):
        assert f"property {prop}" in header
    assert len(data) - len(header) - len("end_header\n") == 100 * 15
    got_pts, got_rgb = read_ply(path)
    assert np.allclose(got_pts, pts.astype(np.float32))
    assert np.array_equal(got_rgb, rgb)


def test_voxel_csv(tmp_path):
    tree = OccupancyOctree(0.1)
    integrate(tree, PointCloud([[0.5, 0.5, 0.5]]), (0, 0, 0), 5)
    path = tmp_path / "v.csv"
    write_voxel_csv(path, export_voxels(tree))
    lines = path.read_text().splitlines()
    assert lines[0] == "cx,cy,cz,size_m,prob"
    cx, cy, cz, size, prob = map(float, lines[1].split(","))
    assert (cx, cy, cz, size) == (0.55, 0.55, 0.55, 0.1)
    assert prob == pytest.approx(0.7)


def test_fuse_clouds_length_mismatch(scene, small_manifest):
    from fusemap.dataset import render_depth
    from fusemap.sync import FrameSet
    from fusemap.geometry import Pose

    img = render_depth(scene, small_manifest.intrinsics, scene.camera_pose(0), 0)
    fs = [FrameSet(img, Pose(0, SE3.identity()), 0)]
    with pytest.raises(LengthMismatch):
        fuse_clouds(fs, Trajectory([0, 1], [SE3.identity(), SE3.identity()]))
