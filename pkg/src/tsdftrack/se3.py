"""Rigid-body pose algebra, rotation averaging and trajectory evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation


def _orthonormalize(rot: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rot)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``.

    Translation is in meters. A camera pose maps camera coordinates
    into world coordinates.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float).reshape(3, 3)
        trans = np.array(self.translation, dtype=float).reshape(3)
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "Pose":
        mat = np.asarray(mat, dtype=float)
        return cls(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> "Pose":
        q = np.asarray(quat_xyzw, dtype=float)
        return cls(Rotation.from_quat(q / np.linalg.norm(q)).as_matrix(), translation)

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def quaternion(self) -> np.ndarray:
        """Unit quaternion ``(x, y, z, w)`` with ``w >= 0``."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        return -q if q[3] < 0 else q

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return (
            bool(np.all(np.isfinite(r)))
            and bool(np.all(np.isfinite(self.translation)))
            and np.allclose(r.T @ r, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) < tol
        )

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, translation={np.round(self.translation, 6).tolist()})"


def compose(a: Pose, b: Pose) -> Pose:
    """Return the pose that applies ``b`` first, then ``a``."""
    rot = _orthonormalize(a.rotation @ b.rotation)
    return Pose(rot, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(rotvecs: np.ndarray) -> np.ndarray:
    """Vectorized exponential map from ``(..., 3)`` rotation vectors to ``(..., 3, 3)`` matrices."""
    r = np.asarray(rotvecs, dtype=float)
    theta = np.linalg.norm(r, axis=-1)[..., None, None]
    k = np.zeros(r.shape[:-1] + (3, 3))
    k[..., 0, 1] = -r[..., 2]
    k[..., 0, 2] = r[..., 1]
    k[..., 1, 0] = r[..., 2]
    k[..., 1, 2] = -r[..., 0]
    k[..., 2, 0] = -r[..., 1]
    k[..., 2, 1] = r[..., 0]
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * k + b * (k @ k)


def from_rotvec_trans(rotvec, translation) -> Pose:
    """Pose from an axis-angle vector (radians) and a translation (meters)."""
    return Pose(rodrigues(np.asarray(rotvec, dtype=float)), translation)


def _angle_deg(rot: np.ndarray) -> float:
    # atan2 keeps precision near 0 and pi, where arccos of the trace does not
    c = (np.trace(rot) - 1.0) / 2.0
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    return float(np.degrees(np.arctan2(np.linalg.norm(w) / 2.0, c)))


def rotation_angle_deg(p: Pose) -> float:
    """Rotation magnitude of ``p`` in degrees."""
    return _angle_deg(p.rotation)


def rotation_error_deg(est: Pose, gt: Pose) -> float:
    """Geodesic angle between two rotations, in degrees."""
    return _angle_deg(gt.rotation.T @ est.rotation)


def translation_error_m(est: Pose, gt: Pose) -> float:
    return float(np.linalg.norm(gt.translation - est.translation))


@dataclass(frozen=True)
class PoseError:
    rot_deg: float
    trans_m: float


def pose_error(est: Pose, gt: Pose) -> PoseError:
    return PoseError(rotation_error_deg(est, gt), translation_error_m(est, gt))


def average_poses(poses: Sequence[Pose]) -> Pose:
    """Mean pose: arithmetic mean translation, sign-aligned quaternion mean rotation.

    Suitable for tightly clustered rotations, where it agrees with the
    chordal L2 mean to high order.
    """
    if len(poses) == 0:
        raise ValueError("empty pose set")
    rots = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])
    return Pose(_mean_rotation(rots), trans.mean(axis=0))


def _mean_rotation(rots: np.ndarray) -> np.ndarray:
    quats = Rotation.from_matrix(rots).as_quat()
    signs = np.where(quats @ quats[0] < 0, -1.0, 1.0)
    q = (quats * signs[:, None]).sum(axis=0)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def average_rigid(rotations: np.ndarray, translations: np.ndarray) -> Pose:
    """Array form of :func:`average_poses` for ``(N, 3, 3)`` / ``(N, 3)`` inputs."""
    if len(rotations) == 0:
        raise ValueError("empty pose set")
    return Pose(_mean_rotation(np.asarray(rotations)), np.asarray(translations).mean(axis=0))


class Trajectory:
    """Timestamped sequence of poses with strictly increasing timestamps."""

    def __init__(self, timestamps: Iterable[float] = (), poses: Iterable[Pose] = ()):
        self.timestamps = np.asarray(list(timestamps), dtype=float)
        self.poses = list(poses)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.timestamps.tolist(), self.poses))

    def __getitem__(self, i):
        return self.timestamps[i], self.poses[i]

    def append(self, timestamp: float, pose: Pose) -> None:
        if len(self.timestamps) and timestamp <= self.timestamps[-1]:
            raise ValueError(f"timestamp {timestamp} is not after {self.timestamps[-1]}")
        self.timestamps = np.append(self.timestamps, float(timestamp))
        self.poses.append(pose)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.stack([p.translation for p in self.poses])

    def transformed(self, t: Pose) -> "Trajectory":
        """Left-multiply every pose by ``t``."""
        return Trajectory(self.timestamps, [compose(t, p) for p in self.poses])

    def subset(self, indices) -> "Trajectory":
        indices = list(indices)
        return Trajectory(self.timestamps[indices], [self.poses[i] for i in indices])


def _check_pair(est: Trajectory, gt: Trajectory) -> None:
    if len(est) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")
    if not np.allclose(est.timestamps, gt.timestamps, atol=1e-6):
        raise ValueError("trajectory timestamps do not match")


def align_rigid(est: Trajectory, gt: Trajectory, allow_degenerate: bool = False) -> Pose:
    """Least-squares rigid transform (no scale) taking ``est`` positions onto ``gt``.

    Raises ``ValueError("degenerate alignment")`` when the positions are
    collinear or coincident, unless ``allow_degenerate`` is set, in which
    case any minimizer is returned.
    """
    _check_pair(est, gt)
    if len(est) < 3 and not allow_degenerate:
        raise ValueError("degenerate alignment: need at least 3 poses")
    x = est.positions()
    y = gt.positions()
    mx, my = x.mean(axis=0), y.mean(axis=0)
    dx, dy = x - mx, y - my
    sv = np.linalg.svd(dx, compute_uv=False)
    scale = max(sv[0], 1.0)
    rank = int(np.sum(sv > 1e-9 * scale)) if len(sv) else 0
    if rank < 2 and not allow_degenerate:
        raise ValueError("degenerate alignment")
    cov = dy.T @ dx
    u, _, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    return Pose(rot, my - rot @ mx)


def ate_rmse_cm(est: Trajectory, gt: Trajectory) -> float:
    """Absolute trajectory error (RMSE of aligned positions) in centimeters."""
    _check_pair(est, gt)
    if len(est) == 0:
        raise ValueError("empty trajectory")
    # collinear or short trajectories still have a well-defined residual
    t = align_rigid(est, gt, allow_degenerate=True)
    resid = t.apply(est.positions()) - gt.positions()
    return float(np.sqrt(np.mean(np.sum(resid**2, axis=1))) * 100.0)
