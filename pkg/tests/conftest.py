import numpy as np
import pytest
from hypothesis import strategies as st

from tsdftrack.camera import DepthFrame, Intrinsics
from tsdftrack.se3 import Pose, from_rotvec_trans
from tsdftrack.synth import Plane, SceneSdf, render_depth


def random_pose(rng: np.random.Generator, max_angle: float = np.pi * 0.95, max_trans: float = 2.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return from_rotvec_trans(axis * rng.uniform(0, max_angle), rng.uniform(-max_trans, max_trans, 3))


@st.composite
def poses(draw, max_angle=3.0, max_trans=2.0):
    r = draw(st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    t = draw(st.lists(st.floats(-max_trans, max_trans), min_size=3, max_size=3))
    r = np.asarray(r)
    n = np.linalg.norm(r)
    if n > 1:
        r = r / n
    return from_rotvec_trans(r * max_angle, t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_k():
    return Intrinsics(100.0, 100.0, 31.5, 23.5, 64, 48)


def plane_frame(k: Intrinsics, z: float) -> DepthFrame:
    """Frontal plane at depth ``z`` seen from the identity pose."""
    return DepthFrame(0.0, np.full(k.shape, z))


def wall_scene(z: float = 2.0) -> SceneSdf:
    # solid half-space z >= z0
    return SceneSdf().union(Plane((0.0, 0.0, -1.0), -z))


@pytest.fixture(scope="session")
def wall_render(small_k):
    return render_depth(wall_scene(), Pose.identity(), small_k)


@pytest.fixture(scope="session")
def room_model():
    """Room scene fused from five orbit views at 160x120 and 3 cm voxels."""
    from tsdftrack.synth import TrajectorySpec, generate_trajectory, render_sequence, room_scene
    from tsdftrack.tsdf import TsdfConfig, integrate, new_volume

    k = Intrinsics.default(160, 120)
    traj = generate_trajectory(TrajectorySpec(frame_count=5, deg_per_frame=6.0))
    frames = render_sequence(room_scene(), traj, k)
    vol = new_volume(TsdfConfig(voxel_size=0.03, dims=(104, 84, 104), origin=(-1.56, -1.26, -1.56)))
    for f, p in zip(frames, traj.poses):
        integrate(vol, f, p, k)
    return vol, k, traj, frames


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Records ``(criterion, passed, detail)`` for the end-of-run report."""

    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
