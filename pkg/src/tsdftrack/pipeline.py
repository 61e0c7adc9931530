"""Frame loop (initialize, refine, integrate), evaluation and estimator wrappers."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from . import io as tio
from .camera import DepthFrame, Intrinsics, PointCloud, backproject
from .initializer import InitContext, InitializerKind, compose_world, propose_relative
from .se3 import Pose, Trajectory, align_rigid, ate_rmse_cm, compose, inverse, rotation_angle_deg
from .synth import SceneSdf, surface_samples
from .tracker import RefineReport, SearchSize, TrackerConfig, refine
from .tsdf import TsdfConfig, TsdfVolume, extract_surface_points, integrate, new_volume

logger = logging.getLogger(__name__)


@dataclass
class InMemoryDataset:
    """Frames held in memory; same interface as :class:`io.DatasetHandle`."""

    frames: List[DepthFrame]
    intrinsics: Intrinsics
    groundtruth: Optional[Trajectory] = None

    def __len__(self):
        return len(self.frames)

    def frame(self, i: int) -> DepthFrame:
        return self.frames[i]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([f.timestamp for f in self.frames])

    def groundtruth_at_frames(self) -> Optional[Trajectory]:
        return self.groundtruth


@dataclass
class FrameStats:
    frame_index: int
    init_relative: Pose
    refined_pose: Pose
    refine_report: Optional[RefineReport]
    ms_init: float = 0.0
    ms_refine: float = 0.0
    ms_integrate: float = 0.0
    observed_voxels: int = 0

    @property
    def converged(self) -> bool:
        return self.refine_report is None or self.refine_report.converged


@dataclass
class FusionResult:
    trajectory: Trajectory
    volume: TsdfVolume
    stats: List[FrameStats]
    wall_seconds: float

    @property
    def fps(self) -> float:
        return len(self.stats) / self.wall_seconds if self.wall_seconds > 0 else float("inf")

    def __iter__(self):
        # allows ``traj, vol, stats = run_fusion(...)``
        return iter((self.trajectory, self.volume, self.stats))


def auto_origin(cfg: TsdfConfig, first: PointCloud) -> tuple:
    """Grid origin for a volume anchored at the first camera.

    The grid is centered halfway between the camera and the centroid of
    the first frame's points, which keeps the observed scene and the space
    the camera moves through inside the grid.
    """
    if len(first) == 0:
        center = np.zeros(3)
    else:
        center = 0.5 * first.points.mean(axis=0)
    return tuple((center - 0.5 * cfg.extent).tolist())


def _relative(a: Pose, b: Pose) -> Pose:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


def run_fusion(dataset, config: Optional[tio.RunConfig] = None,
               initializer: Optional[InitializerKind] = None) -> FusionResult:
    """Track and fuse every frame; the first frame defines the world frame."""
    config = config or tio.RunConfig()
    n = len(dataset)
    if n == 0:
        raise ValueError("dataset has no frames")
    k = dataset.intrinsics
    if initializer is None:
        spec = config.initializer
        initializer = InitializerKind(spec.kind, spec.rot_noise_deg, spec.trans_noise_cm, spec.seed, spec.path)
    gt = None
    if initializer.name == "oracle":
        gt = dataset.groundtruth_at_frames()
        if gt is None:
            raise ValueError("oracle initializer needs ground truth")

    t_start = time.perf_counter()
    first = dataset.frame(0)
    cloud0 = backproject(first, k, config.tsdf.max_depth)
    tcfg = config.tsdf
    if tcfg.origin is None:
        tcfg = replace(tcfg, origin=auto_origin(tcfg, cloud0))
    vol = new_volume(tcfg)

    traj = Trajectory()
    stats: List[FrameStats] = []
    pose = Pose.identity()
    t0 = time.perf_counter()
    integrate(vol, first, pose, k)
    traj.append(first.timestamp, pose)
    stats.append(FrameStats(0, Pose.identity(), pose, None, 0.0, 0.0,
                            (time.perf_counter() - t0) * 1e3, vol.observed_count()))

    prev_relative = None
    for i in range(1, n):
        frame = dataset.frame(i)
        t0 = time.perf_counter()
        ctx = InitContext(i, pose, prev_relative,
                          _relative(gt.poses[i - 1], gt.poses[i]) if gt is not None else None)
        try:
            rel = propose_relative(initializer, ctx)
        except (KeyError, ValueError) as exc:
            raise RuntimeError(f"frame {i}: initializer failed: {exc}") from exc
        init_pose = compose_world(ctx, rel)
        cloud = backproject(frame, k, tcfg.max_depth)
        t1 = time.perf_counter()
        if len(cloud) == 0:
            logger.warning("frame %d has no valid depth; keeping the initial pose", i)
            report = RefineReport(init_pose, 0, 1.0, config.tracker.initial_search, False)
        else:
            report = refine(vol, cloud, init_pose, config.tracker, np.random.default_rng([config.seed, i]))
        t2 = time.perf_counter()
        if not report.converged:
            logger.info("frame %d: refinement did not converge (error %.3f)", i, report.final_error)
        integrate(vol, frame, report.pose, k)
        t3 = time.perf_counter()
        prev_relative = _relative(pose, report.pose)
        pose = report.pose
        traj.append(frame.timestamp, pose)
        stats.append(FrameStats(i, rel, pose, report, (t1 - t0) * 1e3, (t2 - t1) * 1e3,
                                (t3 - t2) * 1e3, vol.observed_count()))
    return FusionResult(traj, vol, stats, time.perf_counter() - t_start)


# ---------------------------------------------------------------- reports


TRACE_HEADER = "frame,init_rot_deg,init_trans_cm,iters,final_error,converged"
TIMING_HEADER = "frame,ms_init,ms_refine,ms_integrate"


def format_trace_csv(stats: Sequence[FrameStats]) -> str:
    rows = [TRACE_HEADER]
    for s in stats:
        rep = s.refine_report
        iters = rep.iterations if rep else 0
        err = rep.final_error if rep else 0.0
        rows.append(
            f"{s.frame_index},{rotation_angle_deg(s.init_relative):.6f},"
            f"{np.linalg.norm(s.init_relative.translation) * 100:.6f},{iters},{err:.9f},{int(s.converged)}"
        )
    return "\n".join(rows) + "\n"


def format_timing_csv(stats: Sequence[FrameStats]) -> str:
    rows = [TIMING_HEADER]
    for s in stats:
        rows.append(f"{s.frame_index},{s.ms_init:.3f},{s.ms_refine:.3f},{s.ms_integrate:.3f}")
    return "\n".join(rows) + "\n"


def summary(result: FusionResult) -> dict:
    tracked = result.stats[1:]

    def mean(attr, rows):
        return float(np.mean([getattr(s, attr) for s in rows])) if rows else 0.0

    return {
        "frames": len(result.stats),
        "wall_s": round(result.wall_seconds, 3),
        "fps": round(result.fps, 3),
        "mean_ms_init": round(mean("ms_init", tracked), 3),
        "mean_ms_refine": round(mean("ms_refine", tracked), 3),
        "mean_ms_integrate": round(mean("ms_integrate", result.stats), 3),
        "mean_iters": round(float(np.mean([s.refine_report.iterations for s in tracked])), 3) if tracked else 0.0,
        "non_converged": sum(not s.converged for s in tracked),
        "observed_voxels": result.volume.observed_count(),
    }


def format_stats(result: FusionResult) -> str:
    return "".join(f"{k} = {v}\n" for k, v in summary(result).items())


def write_outputs(result: FusionResult, out_dir) -> Path:
    """Write trajectory.txt, surface.ply, stats.txt, trace.csv and timing.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tio.write_trajectory(result.trajectory, out / "trajectory.txt")
    tio.write_ply(extract_surface_points(result.volume), out / "surface.ply")
    (out / "stats.txt").write_text(format_stats(result))
    (out / "trace.csv").write_text(format_trace_csv(result.stats))
    (out / "timing.csv").write_text(format_timing_csv(result.stats))
    return out


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class ReconMetrics:
    completeness: float
    accuracy_cm: float
    threshold_cm: float = 10.0


def reference_samples(scene: SceneSdf, voxel_size: float, visible_from: Optional[PointCloud] = None,
                      visible_radius: Optional[float] = None) -> PointCloud:
    """Surface samples of an analytic scene at ``voxel_size``.

    With ``visible_from`` (observed points in scene coordinates), only
    samples within ``visible_radius`` of an observation are kept.
    """
    ref = surface_samples(scene, voxel_size)
    if visible_from is None:
        return ref
    radius = visible_radius if visible_radius is not None else 2.0 * voxel_size
    d, _ = cKDTree(visible_from.points).query(ref.points, distance_upper_bound=radius)
    return PointCloud(ref.points[np.isfinite(d)])


def observed_points(dataset, poses: Trajectory, rate: float = 1 / 8) -> PointCloud:
    """Back-projected depth of every frame placed by ``poses`` (visibility reference)."""
    from .camera import downsample

    k = dataset.intrinsics
    pts = [downsample(backproject(dataset.frame(i), k), rate).transformed(poses.poses[i]).points
           for i in range(len(dataset))]
    return PointCloud(np.concatenate(pts) if pts else np.zeros((0, 3)))


def evaluate_reconstruction(est: PointCloud, ref: Union[SceneSdf, PointCloud], threshold_cm: float = 10.0,
                            ref_samples: Optional[PointCloud] = None, sample_voxel: float = 0.01) -> ReconMetrics:
    """Completeness (percent of reference within threshold) and accuracy (mean error, cm)."""
    if len(est) == 0:
        raise ValueError("empty reconstruction: accuracy is undefined")
    if isinstance(ref, SceneSdf):
        samples = ref_samples if ref_samples is not None else surface_samples(ref, sample_voxel)
        acc = float(np.mean(np.abs(ref.eval(est.points))))
    else:
        samples = ref_samples if ref_samples is not None else ref
        if len(ref) == 0:
            raise ValueError("empty reference cloud")
        acc = float(np.mean(cKDTree(ref.points).query(est.points)[0]))
    if len(samples) == 0:
        raise ValueError("empty reference samples")
    d, _ = cKDTree(est.points).query(samples.points)
    comp = 100.0 * float(np.mean(d <= threshold_cm / 100.0))
    return ReconMetrics(comp, acc * 100.0, threshold_cm)


def to_reference_frame(points: PointCloud, est: Trajectory, gt: Trajectory, anchor: str = "first") -> PointCloud:
    """Map reconstruction points into ground-truth coordinates.

    ``anchor="first"`` uses the first pose pair (the estimated world frame
    is the first camera by construction); ``anchor="aligned"`` uses the
    least-squares trajectory alignment of the ATE metric.
    """
    if anchor == "first":
        t = compose(gt.poses[0], inverse(est.poses[0]))
    elif anchor == "aligned":
        t = align_rigid(est, gt, allow_degenerate=True)
    else:
        raise ValueError(f"unknown anchor {anchor!r}")
    return points.transformed(t)


# ---------------------------------------------------------------- estimators


class RandomizedPoseRefiner(BaseEstimator):
    """Estimator wrapper around :func:`tracker.refine`.

    ``fit`` stores the model volume; ``predict`` refines one cloud from an
    initial pose.
    """

    def __init__(self, initial_search=(10.0, 10.0), beta=0.1, schedule=None, max_iters=20,
                 min_search=(0.1, 0.1), min_valid_fraction=0.1, stall_limit=3, random_state=0):
        self.initial_search = initial_search
        self.beta = beta
        self.schedule = schedule
        self.max_iters = max_iters
        self.min_search = min_search
        self.min_valid_fraction = min_valid_fraction
        self.stall_limit = stall_limit
        self.random_state = random_state

    def tracker_config(self) -> TrackerConfig:
        kw = {}
        if self.schedule is not None:
            kw["schedule"] = self.schedule
        return TrackerConfig(SearchSize(*self.initial_search), self.beta, max_iters=self.max_iters,
                             min_search=SearchSize(*self.min_search),
                             min_valid_fraction=self.min_valid_fraction, stall_limit=self.stall_limit, **kw)

    def fit(self, volume: TsdfVolume, y=None):
        if volume.observed_count() == 0:
            raise ValueError("volume has no observed voxels")
        self.config_ = self.tracker_config()
        self.volume_ = volume
        return self

    def predict(self, cloud: PointCloud, init: Pose) -> Pose:
        return self.refine(cloud, init).pose

    def refine(self, cloud: PointCloud, init: Pose) -> RefineReport:
        if not hasattr(self, "volume_"):
            raise RuntimeError("call fit(volume) first")
        return refine(self.volume_, cloud, init, self.config_, np.random.default_rng(self.random_state))


class DenseFusion(BaseEstimator):
    """Estimator wrapper around :func:`run_fusion`.

    ``fit(dataset)`` builds ``trajectory_``, ``volume_`` and ``stats_``;
    ``predict()`` returns the reconstructed surface points and
    ``score(dataset)`` the negative ATE-RMSE in centimeters.
    """

    def __init__(self, voxel_size=0.02, dims=(256, 256, 256), origin=None, trunc_margin=None,
                 initializer="identity", rot_noise_deg=0.0, trans_noise_cm=0.0, guesses=None,
                 refiner: Optional[RandomizedPoseRefiner] = None, random_state=0):
        self.voxel_size = voxel_size
        self.dims = dims
        self.origin = origin
        self.trunc_margin = trunc_margin
        self.initializer = initializer
        self.rot_noise_deg = rot_noise_deg
        self.trans_noise_cm = trans_noise_cm
        self.guesses = guesses
        self.refiner = refiner
        self.random_state = random_state

    def run_config(self) -> tio.RunConfig:
        refiner = self.refiner if self.refiner is not None else RandomizedPoseRefiner()
        spec = tio.InitializerSpec(self.initializer, self.rot_noise_deg, self.trans_noise_cm,
                                   self.random_state, self.guesses if isinstance(self.guesses, str) else None)
        return tio.RunConfig(TsdfConfig(self.voxel_size, self.dims, self.origin, self.trunc_margin),
                             refiner.tracker_config(), spec, seed=self.random_state)

    def fit(self, dataset, y=None):
        cfg = self.run_config()
        init = None
        if isinstance(self.guesses, dict):
            init = InitializerKind.external(self.guesses)
        result = run_fusion(dataset, cfg, init)
        self.result_ = result
        self.trajectory_ = result.trajectory
        self.volume_ = result.volume
        self.stats_ = result.stats
        return self

    def predict(self, X=None) -> PointCloud:
        return extract_surface_points(self.volume_)

    def score(self, dataset, y=None) -> float:
        gt = y if y is not None else dataset.groundtruth_at_frames()
        if gt is None:
            raise ValueError("scoring needs ground truth")
        return -ate_rmse_cm(self.trajectory_, gt)
