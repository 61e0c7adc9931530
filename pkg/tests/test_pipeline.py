import numpy as np
import pytest
from sklearn.base import clone

from tsdftrack import io as tio
from tsdftrack.camera import DepthFrame, Intrinsics, PointCloud
from tsdftrack.pipeline import (
    TIMING_HEADER, TRACE_HEADER, DenseFusion, InMemoryDataset, RandomizedPoseRefiner, evaluate_reconstruction,
    format_stats, format_timing_csv, format_trace_csv, reference_samples, run_fusion, summary, to_reference_frame,
    write_outputs,
)
from tsdftrack.se3 import Pose, Trajectory, compose, from_rotvec_trans, inverse
from tsdftrack.synth import (
    SceneSdf, Sphere, TrajectorySpec, generate_trajectory, render_sequence, room_scene, surface_samples,
)
from tsdftrack.tracker import TrackerConfig
from tsdftrack.tsdf import TsdfConfig

SMALL = tio.RunConfig(
    TsdfConfig(voxel_size=0.04, dims=(96, 96, 96)),
    TrackerConfig(schedule=((256, 1 / 8),), max_iters=4),
)
K = Intrinsics.default(80, 60)


@pytest.fixture(scope="module")
def orbit():
    traj = generate_trajectory(TrajectorySpec(frame_count=6, deg_per_frame=2.0))
    return InMemoryDataset(render_sequence(room_scene(), traj, K), K, traj)


@pytest.fixture(scope="module")
def fused(orbit):
    return run_fusion(orbit, SMALL)


def test_single_frame(orbit):
    ds = InMemoryDataset(orbit.frames[:1], K, orbit.groundtruth.subset([0]))
    traj, vol, stats = run_fusion(ds, SMALL)
    assert len(traj) == 1 and np.array_equal(traj.poses[0].as_matrix(), np.eye(4))
    assert vol.observed_count() > 0 and len(stats) == 1


def test_empty_dataset():
    with pytest.raises(ValueError):
        run_fusion(InMemoryDataset([], K), SMALL)


def test_fusion_outputs(fused, orbit):
    assert len(fused.trajectory) == len(orbit)
    assert np.array_equal(fused.trajectory.timestamps, orbit.timestamps)
    assert [s.frame_index for s in fused.stats] == list(range(len(orbit)))
    counts = [s.observed_voxels for s in fused.stats]
    assert counts == sorted(counts)
    for s in fused.stats:
        assert min(s.ms_init, s.ms_refine, s.ms_integrate) >= 0
    assert all(s.refine_report.iterations <= 4 for s in fused.stats[1:])


def test_reports(fused, tmp_path):
    trace = format_trace_csv(fused.stats).splitlines()
    timing = format_timing_csv(fused.stats).splitlines()
    assert trace[0] == TRACE_HEADER and timing[0] == TIMING_HEADER
    assert len(trace) == len(timing) == len(fused.stats) + 1
    info = summary(fused)
    assert info["frames"] == len(fused.stats)
    assert info["fps"] == pytest.approx(len(fused.stats) / fused.wall_seconds, rel=1e-2)
    assert {"mean_ms_init", "mean_ms_refine", "mean_ms_integrate"} <= set(info)
    assert "fps = " in format_stats(fused)
    out = write_outputs(fused, tmp_path / "o")
    for name in ("trajectory.txt", "surface.ply", "stats.txt", "trace.csv", "timing.csv"):
        assert (out / name).exists()
    assert len(tio.read_trajectory(out / "trajectory.txt")) == len(fused.stats)


def test_deterministic(orbit, fused):
    again = run_fusion(orbit, SMALL)
    assert tio.format_trajectory(again.trajectory) == tio.format_trajectory(fused.trajectory)
    assert format_trace_csv(again.stats) == format_trace_csv(fused.stats)


def test_initializer_errors_name_frame(orbit):
    cfg = tio.RunConfig(SMALL.tsdf, SMALL.tracker, tio.InitializerSpec("oracle"))
    with pytest.raises(ValueError, match="ground truth"):
        run_fusion(InMemoryDataset(orbit.frames[:2], K), cfg)
    from tsdftrack.initializer import InitializerKind

    with pytest.raises(RuntimeError, match="frame 2"):
        run_fusion(orbit, SMALL, InitializerKind.external({1: Pose.identity()}))


def test_oracle_zero_noise_starts_at_truth(orbit):
    from tsdftrack.initializer import InitializerKind

    res = run_fusion(InMemoryDataset(orbit.frames[:3], K, orbit.groundtruth.subset([0, 1, 2])), SMALL,
                     InitializerKind.oracle(0, 0))
    gt = orbit.groundtruth.poses
    rel = compose(inverse(gt[0]), gt[1])
    assert np.allclose(res.stats[1].init_relative.as_matrix(), rel.as_matrix(), atol=1e-12)


def test_empty_frame_keeps_initial_pose(orbit):
    frames = list(orbit.frames[:2]) + [DepthFrame(0.2, np.zeros(K.shape))]
    res = run_fusion(InMemoryDataset(frames, K), SMALL)
    assert not res.stats[2].converged
    assert np.allclose(res.trajectory.poses[2].as_matrix(), res.trajectory.poses[1].as_matrix(), atol=1e-12)


# ---------------------------------------------------------------- evaluation

def _sphere_ref():
    scene = SceneSdf().union(Sphere((0, 0, 0), 1.0))
    return scene, surface_samples(scene, 0.02)


def test_eval_exact_samples():
    scene, ref = _sphere_ref()
    m = evaluate_reconstruction(ref, scene, ref_samples=ref)
    assert m.completeness == 100.0 and m.accuracy_cm < 0.1
    m2 = evaluate_reconstruction(ref, ref)
    assert m2.completeness == 100.0 and m2.accuracy_cm == pytest.approx(0.0, abs=1e-12)


def test_eval_empty():
    scene, ref = _sphere_ref()
    with pytest.raises(ValueError, match="empty"):
        evaluate_reconstruction(PointCloud(np.zeros((0, 3))), scene, ref_samples=ref)


def test_eval_offset_along_normals():
    scene, ref = _sphere_ref()
    pts = ref.points / np.linalg.norm(ref.points, axis=1, keepdims=True)
    offset = PointCloud(ref.points + 0.03 * pts)
    m = evaluate_reconstruction(offset, scene, threshold_cm=10, ref_samples=ref)
    assert m.completeness == 100.0
    assert m.accuracy_cm == pytest.approx(3.0, abs=0.1)
    assert 0 <= evaluate_reconstruction(offset, scene, 1.0, ref_samples=ref).completeness < 100


def test_reference_visibility_filter():
    scene, ref = _sphere_ref()
    cap = PointCloud(ref.points[ref.points[:, 2] > 0.5])
    vis = reference_samples(scene, 0.02, visible_from=cap)
    assert 0 < len(vis) < len(ref)


def test_to_reference_frame(orbit):
    gt = orbit.groundtruth
    est = Trajectory(gt.timestamps, [compose(inverse(gt.poses[0]), p) for p in gt.poses])
    pts = PointCloud(np.random.default_rng(0).normal(size=(10, 3)))
    back = to_reference_frame(pts, est, gt)
    assert np.allclose(back.points, gt.poses[0].apply(pts.points), atol=1e-9)
    aligned = to_reference_frame(pts, est, gt, anchor="aligned")
    assert np.allclose(aligned.points, back.points, atol=1e-6)
    with pytest.raises(ValueError):
        to_reference_frame(pts, est, gt, anchor="mean")


# ---------------------------------------------------------------- estimators

def test_refiner_estimator(fused, orbit):
    from tsdftrack.camera import backproject

    ref = RandomizedPoseRefiner(schedule=((256, 1 / 8),), max_iters=3, random_state=4)
    assert clone(ref).get_params() == ref.get_params()
    with pytest.raises(RuntimeError):
        ref.predict(PointCloud(np.zeros((1, 3))), Pose.identity())
    ref.fit(fused.volume)
    cloud = backproject(orbit.frames[3], K)
    init = fused.trajectory.poses[3]
    assert ref.refine(cloud, init).iterations <= 3
    assert np.array_equal(ref.predict(cloud, init).as_matrix(), ref.predict(cloud, init).as_matrix())


def test_dense_fusion_estimator(orbit, fused):
    model = DenseFusion(voxel_size=0.04, dims=(96, 96, 96),
                        refiner=RandomizedPoseRefiner(schedule=((256, 1 / 8),), max_iters=4))
    assert clone(model).get_params()["voxel_size"] == 0.04
    model.fit(orbit)
    assert tio.format_trajectory(model.trajectory_) == tio.format_trajectory(fused.trajectory)
    assert len(model.predict()) > 0
    assert model.score(orbit) <= 0
