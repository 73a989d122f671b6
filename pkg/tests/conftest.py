import numpy as np
import pytest

from fusemap.dataset import Box, DatasetManifest, SceneSpec, Waypoint
from fusemap.depth import CameraIntrinsics


def room_scene(**kw) -> SceneSpec:
    """A 6 x 5 x 2.8 m room with three boxes; plane rich, like an office corner."""
    room = Box((-3.0, -2.5, 0.0), (3.0, 2.5, 2.8))
    obstacles = [
        Box((1.0, 0.5, 0.0), (1.8, 1.5, 1.0)),
        Box((-1.5, -2.0, 0.0), (-0.8, -1.2, 1.5)),
        Box((1.5, -1.5, 0.5), (2.0, -1.0, 2.0)),
    ]
    traj = kw.pop("trajectory", [Waypoint(0.0, (-1.0, 0.0, 1.2), 0.0, 0.0),
                                 Waypoint(4.0, (0.2, 0.0, 1.2), 40.0, -10.0)])
    return SceneSpec(room, obstacles, traj, **kw)


@pytest.fixture
def scene():
    return room_scene()


@pytest.fixture
def small_manifest():
    return DatasetManifest(CameraIntrinsics.from_fov(160, 120))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
