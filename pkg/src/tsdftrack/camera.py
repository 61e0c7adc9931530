"""Pinhole camera model, depth frames and point clouds."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_MAX_RANGE = 8.0


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @classmethod
    def default(cls, width: int = 320, height: int = 240) -> "Intrinsics":
        """A Kinect-like camera scaled to the requested resolution."""
        s = width / 640.0
        return cls(525.0 * s, 525.0 * s, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass(eq=False)
class DepthFrame:
    """Depth image in meters; invalid pixels are NaN in memory."""

    timestamp: float
    depth: np.ndarray
    color: Optional[np.ndarray] = None

    def __post_init__(self):
        d = np.array(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise ValueError(f"depth must be 2-D, got shape {d.shape}")
        d[~(d > 0)] = np.nan
        self.depth = d

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def valid_count(self) -> int:
        return int(self.valid_mask.sum())


@dataclass(eq=False)
class PointCloud:
    """Points ``(N, 3)`` with the flat source pixel index of each point (``-1`` if none)."""

    points: np.ndarray
    pixel_indices: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.pixel_indices is None:
            self.pixel_indices = np.full(len(self.points), -1, dtype=np.int64)
        else:
            self.pixel_indices = np.asarray(self.pixel_indices, dtype=np.int64)
        if len(self.pixel_indices) != len(self.points):
            raise ValueError("pixel_indices length does not match points")

    def __len__(self):
        return len(self.points)

    def transformed(self, pose) -> "PointCloud":
        return PointCloud(pose.apply(self.points), self.pixel_indices)


def backproject(frame: DepthFrame, k: Intrinsics, max_depth: float = DEFAULT_MAX_RANGE) -> PointCloud:
    """Lift every valid depth pixel to a camera-frame 3-D point.

    Pixels are visited in row-major order; depths outside ``(0, max_depth)``
    are skipped.
    """
    if frame.depth.shape != k.shape:
        raise ValueError(f"frame shape {frame.depth.shape} does not match intrinsics {k.shape}")
    d = frame.depth.ravel()
    idx = np.flatnonzero(np.isfinite(d) & (d > 0) & (d < max_depth))
    z = d[idx]
    v, u = np.divmod(idx, k.width)
    pts = np.column_stack([z * (u - k.cx) / k.fx, z * (v - k.cy) / k.fy, z])
    return PointCloud(pts, idx)


def project(point, k: Intrinsics) -> Optional[tuple[float, float, float]]:
    x, y, z = (float(c) for c in point)
    if not z > 0:
        return None
    u = k.fx * x / z + k.cx
    v = k.fy * y / z + k.cy
    if not (-0.5 <= u < k.width - 0.5 and -0.5 <= v < k.height - 0.5):
        return None
    return (u, v, z)


def project_points(points: np.ndarray, k: Intrinsics):
    """Vectorized projection: returns ``(u, v, z, inside)`` arrays."""
    p = np.asarray(points, dtype=float)
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p[:, 0] / z + k.cx
        v = k.fy * p[:, 1] / z + k.cy
    inside = (z > 0) & (u >= -0.5) & (u < k.width - 0.5) & (v >= -0.5) & (v < k.height - 0.5)
    return u, v, z, inside


def pixel_rays(k: Intrinsics) -> np.ndarray:
    """Unnormalized camera-frame ray ``(x/z, y/z, 1)`` for every pixel, shape ``(H*W, 3)``."""
    v, u = np.divmod(np.arange(k.width * k.height), k.width)
    return np.column_stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(len(u))])


def downsample(cloud: PointCloud, rate: float) -> PointCloud:
    """Strided subset of ``ceil(n * rate)`` points in source order."""
    if not 0 < rate <= 1:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    n = len(cloud)
    if rate == 1:
        return cloud
    m = math.ceil(n * rate - 1e-9)
    idx = np.minimum(np.floor(np.arange(m) / rate + 1e-9).astype(np.int64), n - 1)
    return PointCloud(cloud.points[idx], cloud.pixel_indices[idx])
