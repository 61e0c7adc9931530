"""Dense truncated signed distance volume."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .camera import DepthFrame, Intrinsics, PointCloud, pixel_rays
from .se3 import Pose, inverse

VALUE_BYTES = 4
WEIGHT_BYTES = 2
DEFAULT_MEMORY_BUDGET = 2 * 1024**3


@dataclass
class TsdfConfig:
    """Grid geometry and fusion parameters.

    ``trunc_margin`` defaults to five voxels. ``origin`` is the world
    position of the grid's minimum corner; voxel ``(i, j, k)`` has its
    center at ``origin + (ijk + 0.5) * voxel_size``.
    """

    voxel_size: float = 0.02
    dims: tuple = (256, 256, 256)
    origin: Optional[tuple] = None
    trunc_margin: Optional[float] = None
    max_weight: float = 128.0
    max_depth: float = 8.0
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.origin is not None:
            self.origin = tuple(float(o) for o in self.origin)
        if self.trunc_margin is None:
            self.trunc_margin = 5.0 * self.voxel_size
        self.validate()

    def validate(self) -> None:
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"dims must be three values >= 8, got {self.dims}")
        if self.trunc_margin < 2 * self.voxel_size - 1e-12:
            raise ValueError(f"trunc_margin {self.trunc_margin} is below two voxels")
        if not self.max_weight >= 1:
            raise ValueError(f"max_weight must be >= 1, got {self.max_weight}")
        if self.origin is not None and len(self.origin) != 3:
            raise ValueError(f"origin must have three values, got {self.origin}")

    def required_bytes(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz * (VALUE_BYTES + WEIGHT_BYTES)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * self.voxel_size


class TsdfVolume:
    """Voxel grid of normalized distances (metric distance / trunc_margin) and weights.

    Unobserved voxels have weight 0 and value 1.
    """

    def __init__(self, config: TsdfConfig):
        if config.origin is None:
            raise ValueError("TsdfConfig.origin must be set before allocating a volume")
        need = config.required_bytes()
        if need > config.memory_budget:
            raise MemoryError(
                f"TSDF volume {config.dims} needs {need} bytes, over the budget of {config.memory_budget}"
            )
        self.config = config
        self.origin = np.asarray(config.origin, dtype=float)
        self.voxel_size = float(config.voxel_size)
        self.trunc = float(config.trunc_margin)
        try:
            self.values = np.ones(config.dims, dtype=np.float32)
            self.weights = np.zeros(config.dims, dtype=np.uint16)
            # query view; NaN where unobserved
            self._field = np.full(config.dims, np.nan, dtype=np.float32)
        except MemoryError as exc:
            raise MemoryError(f"TSDF volume {config.dims} needs {need} bytes: {exc}") from exc

    @property
    def dims(self) -> tuple:
        return self.config.dims

    @property
    def field(self) -> np.ndarray:
        return self._field

    def observed_count(self) -> int:
        return int(np.count_nonzero(self.weights))

    def to_grid(self, points: np.ndarray) -> np.ndarray:
        """World points to continuous grid indices (voxel centers at integers)."""
        return (np.asarray(points, dtype=float) - self.origin) / self.voxel_size - 0.5

    def voxel_centers(self, index: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=float) + 0.5) * self.voxel_size

    def set_field(self, values: np.ndarray, weights: np.ndarray) -> None:
        """Overwrite the whole grid (tests and oracle volumes)."""
        self.values[...] = np.clip(values, -1.0, 1.0)
        self.weights[...] = np.clip(weights, 0, self.config.max_weight)
        self.values[self.weights == 0] = 1.0
        self._field[...] = np.where(self.weights > 0, self.values, np.nan)

    def copy(self) -> "TsdfVolume":
        out = TsdfVolume.__new__(TsdfVolume)
        out.__dict__.update(self.__dict__)
        out.values = self.values.copy()
        out.weights = self.weights.copy()
        out._field = self._field.copy()
        return out


def new_volume(config: TsdfConfig) -> TsdfVolume:
    return TsdfVolume(config)


def integrate(vol: TsdfVolume, frame: DepthFrame, pose: Pose, k: Intrinsics) -> None:
    """Fuse one posed depth frame with unit weight (running average, weight capped)."""
    if frame.depth.shape != k.shape:
        raise ValueError(f"frame shape {frame.depth.shape} does not match intrinsics {k.shape}")
    cam = inverse(pose)
    depth = np.nan_to_num(frame.depth, nan=0.0)
    _kernels.integrate_kernel(
        vol.values, vol.weights, vol._field, vol.origin, vol.voxel_size,
        np.ascontiguousarray(cam.rotation), np.ascontiguousarray(cam.translation),
        depth, float(k.fx), float(k.fy), float(k.cx), float(k.cy),
        vol.trunc, float(vol.config.max_weight), float(vol.config.max_depth),
    )


def query_trilinear_many(vol: TsdfVolume, points: np.ndarray) -> np.ndarray:
    """Interpolated normalized distance at world points; NaN where invalid."""
    grid = np.ascontiguousarray(vol.to_grid(np.asarray(points, dtype=float).reshape(-1, 3)))
    out = np.empty(len(grid))
    _kernels.query_kernel(vol._field, grid, out)
    return out


def query_trilinear(vol: TsdfVolume, p) -> Optional[float]:
    """Interpolated value at ``p``, or ``None`` outside the grid or next to unobserved voxels."""
    v = query_trilinear_many(vol, np.asarray(p, dtype=float))[0]
    return None if np.isnan(v) else float(v)


def raycast_depth(vol: TsdfVolume, pose: Pose, k: Intrinsics, timestamp: float = 0.0) -> DepthFrame:
    """Render z-depth by marching rays at half-voxel steps to the first +/- crossing."""
    rays = pixel_rays(k)
    norms = np.linalg.norm(rays, axis=1)
    dirs_world = (rays / norms[:, None]) @ pose.rotation.T
    step = 0.5 * vol.voxel_size
    max_steps = int(np.ceil(vol.config.max_depth / step))
    t = np.empty(len(rays))
    _kernels.raycast_kernel(
        vol._field,
        (pose.translation - vol.origin) / vol.voxel_size - 0.5,
        np.ascontiguousarray(dirs_world / vol.voxel_size),
        step, max_steps, t,
    )
    z = t / norms
    z[~(z < vol.config.max_depth)] = np.nan
    return DepthFrame(timestamp, z.reshape(k.shape))


def extract_surface_points(vol: TsdfVolume) -> PointCloud:
    """Linear zero crossings between axis-adjacent observed voxels (world frame)."""
    vals = vol.values
    seen = vol.weights > 0
    out = []
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        a, b = vals[tuple(lo)], vals[tuple(hi)]
        mask = seen[tuple(lo)] & seen[tuple(hi)] & ((a >= 0) != (b >= 0))
        idx = np.argwhere(mask)
        if len(idx) == 0:
            continue
        va = a[mask].astype(np.float64)
        vb = b[mask].astype(np.float64)
        frac = va / (va - vb)
        pos = idx.astype(np.float64)
        pos[:, axis] += frac
        out.append(vol.voxel_centers(pos))
    pts = np.concatenate(out) if out else np.zeros((0, 3))
    return PointCloud(pts)
