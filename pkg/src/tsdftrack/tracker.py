"""Randomized pose refinement against a TSDF volume.

One iteration samples a box of small delta poses around the current
estimate, scores each transformed cloud by its mean absolute normalized
TSDF value, averages the deltas that beat the current estimate, and
shrinks the search box by ``beta + (1 - beta) * error``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .camera import PointCloud, downsample
from .se3 import Pose, average_rigid, compose, rodrigues
from .tsdf import TsdfVolume

logger = logging.getLogger(__name__)

DEFAULT_SCHEDULE = ((10240, 1 / 32), (3072, 1 / 16), (1024, 1 / 8))


@dataclass(frozen=True)
class SearchSize:
    """Sampling half-range: ``omega_deg`` degrees of rotation, ``v_cm`` centimeters of translation."""

    omega_deg: float
    v_cm: float

    def __post_init__(self):
        if not (np.isfinite(self.omega_deg) and np.isfinite(self.v_cm)):
            raise ValueError(f"search size must be finite, got {self}")
        if self.omega_deg < 0 or self.v_cm < 0:
            raise ValueError(f"search size must be non-negative, got {self}")

    def scaled(self, factor: float) -> "SearchSize":
        return SearchSize(self.omega_deg * factor, self.v_cm * factor)

    def below(self, other: "SearchSize") -> bool:
        return self.omega_deg < other.omega_deg and self.v_cm < other.v_cm


@dataclass
class TrackerConfig:
    initial_search: SearchSize = SearchSize(10.0, 10.0)
    beta: float = 0.1
    schedule: Tuple[Tuple[int, float], ...] = DEFAULT_SCHEDULE
    max_iters: int = 20
    min_search: SearchSize = SearchSize(0.1, 0.1)
    min_valid_fraction: float = 0.1
    stall_limit: int = 3

    def __post_init__(self):
        self.schedule = tuple((int(k), float(r)) for k, r in self.schedule)
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.schedule:
            raise ValueError("schedule must not be empty")
        for k, rate in self.schedule:
            if k < 1:
                raise ValueError(f"sample count must be >= 1, got {k}")
            if not 0 < rate <= 1:
                raise ValueError(f"sampling rate must lie in (0, 1], got {rate}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not 0 <= self.min_valid_fraction <= 1:
            raise ValueError(f"min_valid_fraction must lie in [0, 1], got {self.min_valid_fraction}")
        if self.stall_limit < 1:
            raise ValueError(f"stall_limit must be >= 1, got {self.stall_limit}")


@dataclass(frozen=True)
class FitnessResult:
    error: float
    valid_count: int
    sampled_count: int
    reliable: bool = True


@dataclass(frozen=True)
class IterationTrace:
    error: float
    search: SearchSize
    advantage_count: int
    rate: float
    accepted: bool


@dataclass
class RefineReport:
    pose: Pose
    iterations: int
    final_error: float
    final_search: SearchSize
    converged: bool
    trace: List[IterationTrace] = field(default_factory=list)


def _delta_arrays(s: SearchSize, count: int, rng: np.random.Generator):
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    w = np.radians(s.omega_deg)
    v = s.v_cm / 100.0
    rotvecs = rng.uniform(-w, w, size=(count, 3))
    trans = rng.uniform(-v, v, size=(count, 3))
    return rodrigues(rotvecs), trans


def sample_delta_poses(s: SearchSize, count: int, rng: np.random.Generator) -> List[Pose]:
    """``count`` deltas with every rotation-vector and translation component uniform in the box."""
    rots, trans = _delta_arrays(s, count, rng)
    return [Pose(r, t) for r, t in zip(rots, trans)]


def _fitness_batch(vol: TsdfVolume, world_points: np.ndarray, rots: np.ndarray, trans: np.ndarray):
    """Sums and valid counts for deltas applied (left-multiplied) to already-posed points."""
    inv = 1.0 / vol.voxel_size
    grid = np.ascontiguousarray((world_points - vol.origin) * inv - 0.5)
    # move each delta into grid units: g' = R g + ((R - I)(origin/vs + 0.5) + t/vs)
    offset = vol.origin * inv + 0.5
    gt = trans * inv + np.einsum("kij,j->ki", rots, offset) - offset
    sums = np.zeros(len(rots))
    counts = np.zeros(len(rots), dtype=np.int64)
    _kernels.fitness_kernel(vol.field, grid, np.ascontiguousarray(rots), np.ascontiguousarray(gt), sums, counts)
    return sums, counts


def _errors(sums, counts, n_points: int, min_valid_fraction: float) -> np.ndarray:
    need = max(min_valid_fraction * n_points, 1e-12)
    ok = (counts >= need) & (counts > 0)
    err = np.ones(len(sums))
    err[ok] = sums[ok] / counts[ok]
    return np.minimum(err, 1.0)


def fitness(vol: TsdfVolume, cloud: PointCloud, pose: Pose, min_valid_fraction: float = 0.1) -> FitnessResult:
    """Mean absolute normalized TSDF over the posed points that hit valid voxels.

    Saturates to 1 (and ``reliable=False``) when fewer than
    ``min_valid_fraction`` of the points are valid.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    world = pose.apply(cloud.points)
    sums, counts = _fitness_batch(vol, world, np.eye(3)[None], np.zeros((1, 3)))
    err = _errors(sums, counts, len(cloud), min_valid_fraction)[0]
    reliable = counts[0] > 0 and counts[0] >= min_valid_fraction * len(cloud)
    return FitnessResult(float(err), int(counts[0]), len(cloud), bool(reliable))


def candidate_errors(vol: TsdfVolume, cloud: PointCloud, pose: Pose, deltas: Sequence[Pose],
                     min_valid_fraction: float = 0.1) -> np.ndarray:
    """Fitness error of ``compose(delta, pose)`` for every delta."""
    rots = np.stack([d.rotation for d in deltas])
    trans = np.stack([d.translation for d in deltas])
    sums, counts = _fitness_batch(vol, pose.apply(cloud.points), rots, trans)
    return _errors(sums, counts, len(cloud), min_valid_fraction)


def update_search_size(s: SearchSize, error: float, beta: float) -> SearchSize:
    """Contract the search range by ``beta + (1 - beta) * error``."""
    return s.scaled(beta + (1.0 - beta) * error)


def refine(vol: TsdfVolume, full_cloud: PointCloud, init: Pose, cfg: Optional[TrackerConfig] = None,
           rng: Optional[np.random.Generator] = None) -> RefineReport:
    cfg = cfg or TrackerConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(full_cloud) == 0:
        raise ValueError("empty cloud")

    pose = init
    search = cfg.initial_search
    stalls = 0
    trace: List[IterationTrace] = []
    error = 1.0
    for i in range(cfg.max_iters):
        count, rate = cfg.schedule[i % len(cfg.schedule)]
        cloud = downsample(full_cloud, rate)
        n = len(cloud)
        world = pose.apply(cloud.points)

        rots, trans = _delta_arrays(search, count, rng)
        rots = np.concatenate([np.eye(3)[None], rots])
        trans = np.concatenate([np.zeros((1, 3)), trans])
        sums, counts = _fitness_batch(vol, world, rots, trans)
        errs = _errors(sums, counts, n, cfg.min_valid_fraction)
        baseline, errs = errs[0], errs[1:]

        better = np.flatnonzero(errs < baseline)
        accepted = False
        error = baseline
        if len(better):
            delta = average_rigid(rots[1:][better], trans[1:][better])
            s2, c2 = _fitness_batch(vol, world, delta.rotation[None], delta.translation[None])
            new_error = _errors(s2, c2, n, cfg.min_valid_fraction)[0]
            if new_error <= baseline:
                pose = compose(delta, pose)
                error = new_error
                accepted = True
        stalls = 0 if accepted else stalls + 1
        search = update_search_size(search, error, cfg.beta)
        trace.append(IterationTrace(float(error), search, int(len(better)), rate, accepted))
        if search.below(cfg.min_search) or stalls >= cfg.stall_limit:
            break

    floor = vol.voxel_size / vol.trunc
    converged = search.below(cfg.min_search) or error < floor
    return RefineReport(pose, len(trace), float(error), search, bool(converged), trace)
