"""Analytic SDF scenes, camera trajectory families and depth rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .camera import DepthFrame, Intrinsics, PointCloud, backproject, pixel_rays
from .se3 import Pose, Trajectory, compose, from_rotvec_trans

TRACE_EPS = 1e-4


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p):
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        return c - self.radius, c + self.radius

    def manifest(self):
        return "sphere " + " ".join(_fmt(v) for v in (*self.center, self.radius))


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    def sdf(self, p):
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        h = np.asarray(self.half_extents, dtype=float)
        return c - h, c + h

    def manifest(self):
        return "box " + " ".join(_fmt(v) for v in (*self.center, *self.half_extents))


@dataclass(frozen=True)
class Plane:
    """Half-space ``n . p <= offset`` (solid side), ``n`` normalized on construction."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", tuple((n / norm).tolist()))
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def sdf(self, p):
        return p @ np.asarray(self.normal) - self.offset

    def bounds(self):
        return None

    def manifest(self):
        return "plane " + " ".join(_fmt(v) for v in (*self.normal, self.offset))


@dataclass(frozen=True)
class BoxGrid:
    """Copies of one box on a regular lattice: ``2 * count + 1`` along each axis with nonzero period.

    The distance is exact because each box stays inside its own lattice cell.
    """

    center: tuple
    half_extents: tuple
    period: tuple
    count: tuple

    def __post_init__(self):
        for h, p, n in zip(self.half_extents, self.period, self.count):
            if p < 0 or n < 0 or (p > 0 and not 2 * h < p):
                raise ValueError(f"box grid needs 0 < 2 * half_extent < period, got {h}, {p}")
        object.__setattr__(self, "count", tuple(int(n) if p > 0 else 0 for p, n in zip(self.period, self.count)))

    def sdf(self, p):
        r = p - np.asarray(self.center)
        for a in range(3):
            if self.period[a] > 0:
                idx = np.clip(np.floor(r[..., a] / self.period[a] + 0.5), -self.count[a], self.count[a])
                r[..., a] -= self.period[a] * idx
        q = np.abs(r) - np.asarray(self.half_extents)
        return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        span = np.asarray(self.period) * np.asarray(self.count) + np.asarray(self.half_extents)
        return c - span, c + span

    def manifest(self):
        return "grid " + " ".join(_fmt(v) for v in (*self.center, *self.half_extents, *self.period)) + \
            " " + " ".join(str(n) for n in self.count)


@dataclass(frozen=True)
class SphereGrid:
    """Copies of one sphere on a regular lattice (see :class:`BoxGrid`)."""

    center: tuple
    radius: float
    period: tuple
    count: tuple

    def __post_init__(self):
        for p, n in zip(self.period, self.count):
            if p < 0 or n < 0 or (p > 0 and not 2 * self.radius < p):
                raise ValueError(f"sphere grid needs 0 < 2 * radius < period, got {self.radius}, {p}")
        object.__setattr__(self, "count", tuple(int(n) if p > 0 else 0 for p, n in zip(self.period, self.count)))

    def sdf(self, p):
        r = p - np.asarray(self.center)
        for a in range(3):
            if self.period[a] > 0:
                idx = np.clip(np.floor(r[..., a] / self.period[a] + 0.5), -self.count[a], self.count[a])
                r[..., a] -= self.period[a] * idx
        return np.linalg.norm(r, axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center, dtype=float)
        span = np.asarray(self.period) * np.asarray(self.count) + self.radius
        return c - span, c + span

    def manifest(self):
        return "spheregrid " + " ".join(_fmt(v) for v in (*self.center, self.radius, *self.period)) + \
            " " + " ".join(str(n) for n in self.count)


def _fmt(v) -> str:
    return repr(float(v))


@dataclass
class SceneSdf:
    """Primitives folded left to right: union (``min``) or subtraction (``max(a, -b)``)."""

    items: List[Tuple[str, object]] = field(default_factory=list)

    def union(self, prim) -> "SceneSdf":
        self.items.append(("union", prim))
        return self

    def subtract(self, prim) -> "SceneSdf":
        self.items.append(("subtract", prim))
        return self

    def eval(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        flat = np.ascontiguousarray(p.reshape(-1, 3))
        out = np.empty(len(flat))
        _kernels.scene_eval_kernel(*self.packed(), flat, out)
        return out.reshape(p.shape[:-1])

    def eval_reference(self, points) -> np.ndarray:
        """Pure numpy evaluation of the same fold (oracle for the compiled path)."""
        p = np.asarray(points, dtype=float)
        out = np.full(p.shape[:-1], np.inf)
        for op, prim in self.items:
            d = prim.sdf(p)
            out = np.minimum(out, d) if op == "union" else np.maximum(out, -d)
        return out

    def packed(self):
        """Primitive kinds, ops and a ``(N, 12)`` parameter table for the compiled kernels."""
        n = len(self.items)
        kinds = np.empty(n, dtype=np.int64)
        ops = np.empty(n, dtype=np.int64)
        params = np.zeros((n, 12))
        for m, (op, prim) in enumerate(self.items):
            ops[m] = 0 if op == "union" else 1
            if isinstance(prim, Sphere):
                kinds[m] = _kernels.SPHERE
                params[m, :4] = (*prim.center, prim.radius)
            elif isinstance(prim, Box):
                kinds[m] = _kernels.BOX
                params[m, :6] = (*prim.center, *prim.half_extents)
            elif isinstance(prim, BoxGrid):
                kinds[m] = _kernels.BOX_GRID
                params[m] = (*prim.center, *prim.half_extents, *prim.period, *prim.count)
            elif isinstance(prim, SphereGrid):
                kinds[m] = _kernels.SPHERE_GRID
                params[m] = (*prim.center, prim.radius, 0.0, 0.0, *prim.period, *prim.count)
            else:
                kinds[m] = _kernels.PLANE
                params[m, :4] = (*prim.normal, prim.offset)
        return kinds, ops, params

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounds of the bounded union primitives."""
        boxes = [prim.bounds() for op, prim in self.items if op == "union"]
        boxes = [b for b in boxes if b is not None]
        if not boxes:
            raise ValueError("scene has no bounded primitives")
        return np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0)

    def to_manifest(self) -> str:
        lines = []
        for op, prim in self.items:
            lines.append(("subtract " if op == "subtract" else "") + prim.manifest())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str, source: str = "<manifest>") -> "SceneSdf":
        scene = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            op = "union"
            if tok[0] == "subtract":
                op, tok = "subtract", tok[1:]
            if not tok:
                raise ValueError(f"{source}:{lineno}: missing primitive after 'subtract'")
            kind, args = tok[0], tok[1:]
            try:
                vals = [float(a) for a in args]
            except ValueError:
                raise ValueError(f"{source}:{lineno}: non-numeric parameter in {raw!r}") from None
            want = {"sphere": 4, "box": 6, "plane": 4, "grid": 12, "spheregrid": 10}.get(kind)
            if want is None:
                raise ValueError(f"{source}:{lineno}: unknown primitive {kind!r}")
            if len(vals) != want:
                raise ValueError(f"{source}:{lineno}: {kind} takes {want} values, got {len(vals)}")
            if kind == "sphere":
                prim = Sphere(tuple(vals[:3]), vals[3])
            elif kind == "box":
                prim = Box(tuple(vals[:3]), tuple(vals[3:]))
            elif kind in ("grid", "spheregrid"):
                split = 6 if kind == "grid" else 4
                counts = vals[split + 3:]
                if any(v != int(v) for v in counts):
                    raise ValueError(f"{source}:{lineno}: grid counts must be integers")
                try:
                    if kind == "grid":
                        prim = BoxGrid(tuple(vals[:3]), tuple(vals[3:6]), tuple(vals[6:9]), tuple(int(v) for v in counts))
                    else:
                        prim = SphereGrid(tuple(vals[:3]), vals[3], tuple(vals[4:7]), tuple(int(v) for v in counts))
                except ValueError as exc:
                    raise ValueError(f"{source}:{lineno}: {exc}") from None
            else:
                prim = Plane(tuple(vals[:3]), vals[3])
            scene.items.append((op, prim))
        return scene


def eval_sdf(scene: SceneSdf, p) -> np.ndarray:
    return scene.eval(p)


def room_scene() -> SceneSdf:
    """A 3 x 2.4 x 3 m room (y points down, floor at y = +1.2).

    Walls and floor carry a lattice of hemispherical bumps so that every
    view constrains all six pose directions; a cluster of blocks and
    spheres sits in the middle and a few boxes stand against the walls.
    """
    scene = SceneSdf()
    scene.union(Box((0.0, 0.0, 0.0), (1.8, 1.5, 1.8)))
    scene.subtract(Box((0.0, 0.0, 0.0), (1.5, 1.2, 1.5)))
    # center cluster
    scene.union(Box((0.0, 1.0, 0.0), (0.4, 0.2, 0.3)))
    scene.union(Box((0.15, 0.62, -0.05), (0.12, 0.18, 0.1)))
    scene.union(Sphere((-0.2, 0.62, 0.12), 0.18))
    scene.union(Box((-0.05, 0.55, -0.2), (0.06, 0.25, 0.06)))
    scene.union(Box((0.3, 0.7, 0.2), (0.08, 0.1, 0.08)))
    scene.union(Sphere((0.0, 1.05, 0.0), 0.3))
    scene.union(Sphere((0.35, 0.95, 0.3), 0.2))
    scene.union(Sphere((-0.3, 0.9, -0.25), 0.22))
    scene.union(Sphere((0.1, 0.65, -0.1), 0.15))
    scene.union(Sphere((-0.35, 0.7, 0.35), 0.12))
    # furniture along the walls
    scene.union(Box((0.5, 0.9, -1.2), (0.3, 0.3, 0.3)))
    scene.union(Box((-1.2, 0.7, 0.5), (0.3, 0.5, 0.3)))
    scene.union(Box((1.2, -0.2, -0.8), (0.3, 0.6, 0.15)))
    scene.union(Sphere((-0.9, -0.5, -1.2), 0.2))
    scene.union(Box((1.3, 0.6, 0.9), (0.2, 0.6, 0.2)))
    scene.union(Box((-0.6, 0.95, -1.3), (0.25, 0.25, 0.2)))
    scene.union(Box((0.0, -0.3, 1.45), (0.4, 0.08, 0.05)))
    scene.union(Box((-1.45, -0.2, -0.3), (0.05, 0.3, 0.3)))
    # surface relief
    r, step = 0.08, 0.2
    scene.union(SphereGrid((0.0, 1.2, 0.0), r, (step, 0.0, step), (5, 0, 5)))
    scene.union(SphereGrid((0.0, 0.0, 1.5), r, (step, step, 0.0), (5, 4, 0)))
    scene.union(SphereGrid((0.0, 0.0, -1.5), r, (step, step, 0.0), (5, 4, 0)))
    scene.union(SphereGrid((1.5, 0.0, 0.0), r, (0.0, step, step), (0, 4, 5)))
    scene.union(SphereGrid((-1.5, 0.0, 0.0), r, (0.0, step, step), (0, 4, 5)))
    return scene


ROOM_INTERIOR = (np.array([-1.5, -1.2, -1.5]), np.array([1.5, 1.2, 1.5]))


def render_depth(scene: SceneSdf, pose: Pose, k: Intrinsics, max_depth: float = 8.0,
                 timestamp: float = 0.0, max_steps: int = 512) -> DepthFrame:
    """Sphere-trace every pixel ray from the camera center; returns z-depth."""
    rays = pixel_rays(k)
    norms = np.linalg.norm(rays, axis=1)
    dirs = np.ascontiguousarray((rays / norms[:, None]) @ pose.rotation.T)
    t = np.empty(len(dirs))
    # ray length bound: max_depth along z is at most max_depth * norm along the ray
    _kernels.sphere_trace_kernel(*scene.packed(), np.ascontiguousarray(pose.translation), dirs,
                                 TRACE_EPS, max_depth * norms.max(), max_steps, t)
    z = t / norms
    z[~(z < max_depth)] = np.nan
    return DepthFrame(timestamp, z.reshape(k.shape))


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` whose optical (+z) axis points at ``target``; +y is image-down."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


@dataclass
class TrajectorySpec:
    """Camera path family.

    ``kind`` is one of ``orbit``, ``dolly``, ``fast_rotation`` or ``shake``.
    ``drop`` is ``None`` or ``(fraction, seed)``; a fraction of exactly 0.2
    drops every fifth frame, other fractions drop a seeded random subset.
    ``stride`` keeps every ``stride``-th frame instead.
    """

    kind: str = "orbit"
    frame_count: int = 60
    fps: float = 30.0
    deg_per_frame: float = 2.0
    radius: float = 1.0
    height: float = -0.3
    target: Tuple[float, float, float] = (0.0, 0.5, 0.0)
    start_deg: float = 0.0
    dolly_step_m: float = 0.02
    amp_deg: float = 2.0
    amp_cm: float = 2.0
    seed: int = 0
    drop: Optional[Tuple[float, int]] = None
    stride: Optional[int] = None

    def validate(self) -> None:
        if self.kind not in ("orbit", "dolly", "fast_rotation", "shake"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.frame_count < 2:
            raise ValueError(f"frame_count must be >= 2, got {self.frame_count}")
        if not self.fps > 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        if self.drop is not None and not 0 <= self.drop[0] <= 0.9:
            raise ValueError(f"drop fraction must lie in [0, 0.9], got {self.drop[0]}")
        if self.stride is not None and self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.amp_deg < 0 or self.amp_cm < 0:
            raise ValueError("shake amplitudes must be non-negative")


def _orbit_pose(center, radius, height, angle_deg, target) -> Pose:
    a = math.radians(angle_deg)
    eye = center + np.array([radius * math.cos(a), height, radius * math.sin(a)])
    return look_at(eye, center + np.asarray(target, dtype=float))


def generate_trajectory(spec: TrajectorySpec, bounds=ROOM_INTERIOR) -> Trajectory:
    """Ground-truth camera-to-world trajectory inside ``bounds`` (min corner, max corner)."""
    spec.validate()
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    center = (lo + hi) / 2.0
    n = spec.frame_count
    poses = []
    if spec.kind in ("orbit", "shake"):
        for i in range(n):
            poses.append(_orbit_pose(center, spec.radius, spec.height, spec.start_deg + i * spec.deg_per_frame, spec.target))
    elif spec.kind == "dolly":
        start = _orbit_pose(center, spec.radius, spec.height, spec.start_deg, spec.target)
        back = -start.rotation[:, 2]
        for i in range(n):
            poses.append(Pose(start.rotation, start.translation + back * spec.dolly_step_m * i))
    else:
        start = _orbit_pose(center, spec.radius, spec.height, spec.start_deg, spec.target)
        for i in range(n):
            spin = from_rotvec_trans([0.0, math.radians(spec.deg_per_frame * i), 0.0], [0.0, 0.0, 0.0])
            poses.append(compose(start, spin))
    if spec.kind == "shake":
        rng = np.random.default_rng(spec.seed)
        w = math.radians(spec.amp_deg)
        v = spec.amp_cm / 100.0
        shaken = []
        for p in poses:
            jitter = from_rotvec_trans(rng.uniform(-w, w, 3), rng.uniform(-v, v, 3))
            shaken.append(compose(p, jitter))
        poses = shaken
    traj = Trajectory(np.arange(n) / spec.fps, poses)
    keep = kept_frame_indices(spec)
    return traj.subset(keep)


def kept_frame_indices(spec: TrajectorySpec) -> np.ndarray:
    n = spec.frame_count
    keep = np.arange(n)
    if spec.stride is not None:
        keep = keep[:: spec.stride]
    if spec.drop is not None and spec.drop[0] > 0:
        frac, seed = spec.drop
        if abs(frac - 0.2) < 1e-12:
            keep = keep[(keep + 1) % 5 != 0]
        else:
            n_drop = int(round(frac * len(keep)))
            rng = np.random.default_rng(seed)
            # never drop the first frame: it anchors the world frame
            dropped = rng.choice(np.arange(1, len(keep)), size=min(n_drop, len(keep) - 1), replace=False)
            keep = np.delete(keep, dropped)
    return keep


@dataclass
class DepthNoiseModel:
    gaussian_sigma: float = 0.0
    depth_proportional: bool = False
    dropout_fraction: float = 0.0
    quantization_step: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("gaussian_sigma", "dropout_fraction", "quantization_step"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def is_zero(self) -> bool:
        return self.gaussian_sigma == 0 and self.dropout_fraction == 0 and self.quantization_step == 0


def apply_depth_noise(frame: DepthFrame, model: DepthNoiseModel,
                      rng: Optional[np.random.Generator] = None) -> DepthFrame:
    """Gaussian noise, random dropout and quantization on valid pixels only."""
    rng = rng if rng is not None else np.random.default_rng(model.seed)
    d = frame.depth.copy()
    valid = np.isfinite(d)
    vals = d[valid]
    if model.gaussian_sigma > 0:
        sigma = model.gaussian_sigma * (vals if model.depth_proportional else 1.0)
        vals = vals + rng.normal(0.0, 1.0, size=vals.shape) * sigma
    if model.dropout_fraction > 0:
        vals = np.where(rng.random(vals.shape) < model.dropout_fraction, np.nan, vals)
    if model.quantization_step > 0:
        vals = np.round(vals / model.quantization_step) * model.quantization_step
    vals[~(vals > 0)] = np.nan
    d[valid] = vals
    return DepthFrame(frame.timestamp, d, frame.color)


def render_sequence(scene: SceneSdf, traj: Trajectory, k: Intrinsics,
                    noise: Optional[DepthNoiseModel] = None, max_depth: float = 8.0) -> List[DepthFrame]:
    frames = []
    for i, (ts, pose) in enumerate(traj):
        f = render_depth(scene, pose, k, max_depth=max_depth, timestamp=ts)
        if noise is not None and not noise.is_zero():
            f = apply_depth_noise(f, noise, np.random.default_rng([noise.seed, i]))
        frames.append(f)
    return frames


def export_dataset(scene: SceneSdf, trajectory: Trajectory, k: Intrinsics,
                   noise: Optional[DepthNoiseModel], out_dir, max_depth: float = 8.0) -> Path:
    """Render and write a TUM-layout dataset; returns the dataset root."""
    from . import io

    frames = render_sequence(scene, trajectory, k, noise, max_depth)
    return io.write_dataset(out_dir, frames, k, groundtruth=trajectory, scene_manifest=scene.to_manifest())


def surface_samples(scene: SceneSdf, voxel_size: float, bounds=None) -> PointCloud:
    """Zero crossings of the analytic SDF sampled on a grid of ``voxel_size``."""
    from .tsdf import TsdfConfig, extract_surface_points, new_volume

    lo, hi = bounds if bounds is not None else scene.bounds()
    lo = np.asarray(lo, dtype=float) - 2 * voxel_size
    hi = np.asarray(hi, dtype=float) + 2 * voxel_size
    dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int), 8)
    cfg = TsdfConfig(voxel_size=voxel_size, dims=tuple(dims), origin=tuple(lo),
                     memory_budget=1 << 62)
    vol = new_volume(cfg)
    axes = [lo[a] + (np.arange(dims[a]) + 0.5) * voxel_size for a in range(3)]
    values = np.empty(tuple(dims), dtype=np.float32)
    for i, x in enumerate(axes[0]):
        yy, zz = np.meshgrid(axes[1], axes[2], indexing="ij")
        pts = np.stack([np.full_like(yy, x), yy, zz], axis=-1)
        values[i] = np.clip(scene.eval(pts) / cfg.trunc_margin, -1, 1)
    vol.set_field(values, np.ones(tuple(dims)))
    return extract_surface_points(vol)
