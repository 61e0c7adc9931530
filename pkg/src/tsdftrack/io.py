"""Dataset and result file formats.

* TUM RGB-D layout: ``depth/*.png`` (16-bit, meters * 5000, 0 = invalid),
  ``depth.txt`` or ``associations.txt``, ``intrinsics.txt`` and an
  optional ``groundtruth.txt``.
* TUM trajectories: ``timestamp tx ty tz qx qy qz qw`` per line.
* Relative-pose guesses: ``frame_index tx ty tz qx qy qz qw`` per line.
* ASCII PLY point clouds.
* ``key = value`` run configuration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from .camera import DepthFrame, Intrinsics, PointCloud
from .se3 import Pose, Trajectory
from .tsdf import TsdfConfig
from .tracker import DEFAULT_SCHEDULE, SearchSize, TrackerConfig

logger = logging.getLogger(__name__)

DEPTH_SCALE = 5000.0
ASSOC_MAX_DT = 0.02


class FormatError(ValueError):
    """Malformed input file; the message carries ``path:line`` context."""


# ---------------------------------------------------------------- depth images


def write_depth_png(depth: np.ndarray, path) -> None:
    d = np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0)
    raw = np.clip(np.round(d * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path, format="PNG")


def read_depth_png(path) -> np.ndarray:
    """Depth in meters with NaN for invalid pixels."""
    try:
        with Image.open(path) as im:
            if im.mode not in ("I;16", "I;16B", "I", "L"):
                raise FormatError(f"{path}: expected a single-channel 16-bit PNG, got mode {im.mode}")
            raw = np.array(im)
    except FormatError:
        raise
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot decode depth PNG ({exc})") from exc
    if raw.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel image, got shape {raw.shape}")
    d = raw.astype(np.float64) / DEPTH_SCALE
    d[raw == 0] = np.nan
    return d


# ---------------------------------------------------------------- text records


def _records(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def _floats(tokens, path, lineno) -> List[float]:
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise FormatError(f"{path}:{lineno}: non-numeric field in {' '.join(tokens)!r}") from None
    if not all(math.isfinite(v) for v in vals):
        raise FormatError(f"{path}:{lineno}: non-finite value")
    return vals


def _pose_from_fields(vals, path, lineno) -> Pose:
    t, q = np.asarray(vals[0:3]), np.asarray(vals[3:7])
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 0.1:
        raise FormatError(f"{path}:{lineno}: quaternion norm {norm:.4f} is not unit")
    if abs(norm - 1.0) > 1e-3:
        logger.warning("%s:%d: quaternion norm %.6f, normalizing", path, lineno, norm)
    return Pose.from_quaternion(q / norm, t)


def _pose_fields(p: Pose) -> str:
    t = p.translation
    q = p.quaternion()
    return " ".join(f"{v:.9f}" for v in (*t, *q))


def read_trajectory(path) -> Trajectory:
    stamps, poses = [], []
    for lineno, tok in _records(path):
        if len(tok) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(tok)}")
        vals = _floats(tok, path, lineno)
        if stamps and vals[0] <= stamps[-1]:
            raise FormatError(f"{path}:{lineno}: timestamp {vals[0]} is not increasing")
        stamps.append(vals[0])
        poses.append(_pose_from_fields(vals[1:], path, lineno))
    return Trajectory(stamps, poses)


def format_trajectory(traj: Trajectory) -> str:
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for ts, p in traj:
        lines.append(f"{ts:.6f} {_pose_fields(p)}")
    return "\n".join(lines) + "\n"


def write_trajectory(traj: Trajectory, path) -> None:
    Path(path).write_text(format_trajectory(traj))


def read_guesses(path) -> Dict[int, Pose]:
    """Relative pose guesses keyed by frame index."""
    out: Dict[int, Pose] = {}
    for lineno, tok in _records(path):
        if len(tok) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(tok)}")
        try:
            idx = int(tok[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: frame index {tok[0]!r} is not an integer") from None
        if idx in out:
            raise FormatError(f"{path}:{lineno}: duplicate frame index {idx}")
        out[idx] = _pose_from_fields(_floats(tok[1:], path, lineno), path, lineno)
    return out


def write_guesses(guesses: Dict[int, Pose], path) -> None:
    lines = ["# frame_index tx ty tz qx qy qz qw  (relative pose, frame t-1 -> t)"]
    for idx in sorted(guesses):
        lines.append(f"{idx} {_pose_fields(guesses[idx])}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- PLY


def write_ply(cloud: PointCloud, path) -> None:
    pts = np.asarray(cloud.points, dtype=np.float32)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        for x, y, z in pts.tolist():
            fh.write(f"{x:.7g} {y:.7g} {z:.7g}\n")


def read_ply(path) -> PointCloud:
    """Minimal ASCII PLY reader for vertex x/y/z clouds."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    count = None
    props = []
    for i, line in enumerate(lines[1:], 2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise FormatError(f"{path}:{i}: only ASCII PLY is supported")
        if tok[:2] == ["element", "vertex"]:
            count = int(tok[2])
        elif tok[0] == "property" and count is not None:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = lines[i:]
            break
    else:
        raise FormatError(f"{path}: missing end_header")
    if count is None or props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: expected vertex element with x y z properties")
    if len(body) < count:
        raise FormatError(f"{path}: header announces {count} vertices, found {len(body)}")
    pts = np.array([[float(v) for v in body[j].split()[:3]] for j in range(count)]).reshape(-1, 3)
    return PointCloud(pts)


# ---------------------------------------------------------------- datasets


def read_intrinsics(path) -> Intrinsics:
    recs = list(_records(path))
    if len(recs) != 1 or len(recs[0][1]) != 6:
        raise FormatError(f"{path}: expected one line 'fx fy cx cy width height'")
    lineno, tok = recs[0]
    fx, fy, cx, cy, w, h = _floats(tok, path, lineno)
    return Intrinsics(fx, fy, cx, cy, int(w), int(h))


def write_intrinsics(k: Intrinsics, path) -> None:
    Path(path).write_text(
        "# fx fy cx cy width height\n"
        f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n"
    )


def _read_file_list(path):
    out = []
    for lineno, tok in _records(path):
        if len(tok) < 2:
            raise FormatError(f"{path}:{lineno}: expected 'timestamp path'")
        ts = _floats(tok[:1], path, lineno)[0]
        if out and ts <= out[-1][0]:
            raise FormatError(f"{path}:{lineno}: timestamp {ts} is not increasing")
        out.append((ts, tok[1], lineno))
    return out


def _nearest(stamps: np.ndarray, t: float, max_dt: float):
    if len(stamps) == 0:
        return None
    j = int(np.argmin(np.abs(stamps - t)))
    return j if abs(stamps[j] - t) <= max_dt else None


@dataclass
class DatasetHandle:
    root: Path
    intrinsics: Intrinsics
    associations: List[tuple]  # (timestamp, depth path, color path or None)
    groundtruth: Optional[Trajectory] = None

    def __len__(self):
        return len(self.associations)

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([a[0] for a in self.associations])

    def frame(self, i: int) -> DepthFrame:
        ts, depth_path, _ = self.associations[i]
        depth = read_depth_png(self.root / depth_path)
        if depth.shape != self.intrinsics.shape:
            raise FormatError(
                f"{self.root / depth_path}: image {depth.shape} does not match intrinsics {self.intrinsics.shape}"
            )
        return DepthFrame(ts, depth)

    def __iter__(self):
        for i in range(len(self)):
            yield self.frame(i)

    def groundtruth_at_frames(self, max_dt: float = ASSOC_MAX_DT) -> Optional[Trajectory]:
        """Ground-truth poses matched to frame timestamps, or ``None`` without ground truth."""
        if self.groundtruth is None:
            return None
        stamps = self.groundtruth.timestamps
        poses = []
        for ts, path, _ in self.associations:
            j = _nearest(stamps, ts, max_dt)
            if j is None:
                raise FormatError(f"{self.root}: no ground truth within {max_dt}s of frame at {ts}")
            poses.append(self.groundtruth.poses[j])
        return Trajectory(self.timestamps, poses)


def read_dataset(root) -> DatasetHandle:
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"{root}: dataset directory not found")
    k = read_intrinsics(root / "intrinsics.txt")
    assoc_path = root / "associations.txt"
    assoc = []
    if assoc_path.exists():
        prev = None
        for lineno, tok in _records(assoc_path):
            if len(tok) != 4:
                raise FormatError(f"{assoc_path}:{lineno}: expected 't_rgb rgb_path t_depth depth_path'")
            t_rgb, t_depth = _floats([tok[0], tok[2]], assoc_path, lineno)
            rgb, depth = tok[1], tok[3]
            if "depth" in rgb and "depth" not in depth:
                rgb, depth, t_rgb, t_depth = depth, rgb, t_depth, t_rgb
            if prev is not None and t_depth <= prev:
                raise FormatError(f"{assoc_path}:{lineno}: timestamp {t_depth} is not increasing")
            prev = t_depth
            assoc.append((t_depth, depth, rgb))
    else:
        depth_list = _read_file_list(root / "depth.txt")
        rgb_path = root / "rgb.txt"
        rgb_list = _read_file_list(rgb_path) if rgb_path.exists() else []
        rgb_stamps = np.array([r[0] for r in rgb_list])
        for ts, path, lineno in depth_list:
            color = None
            if rgb_list:
                j = _nearest(rgb_stamps, ts, ASSOC_MAX_DT)
                if j is None:
                    continue
                color = rgb_list[j][1]
            assoc.append((ts, path, color))
    if not assoc:
        raise FormatError(f"{root}: dataset has no frames")
    for ts, path, _ in assoc:
        if not (root / path).exists():
            raise FormatError(f"{root / path}: depth image listed at t={ts} is missing")
    gt_path = root / "groundtruth.txt"
    gt = read_trajectory(gt_path) if gt_path.exists() else None
    return DatasetHandle(root, k, assoc, gt)


def write_dataset(out_dir, frames: Sequence[DepthFrame], k: Intrinsics,
                  groundtruth: Optional[Trajectory] = None, scene_manifest: Optional[str] = None) -> Path:
    root = Path(out_dir)
    try:
        (root / "depth").mkdir(parents=True, exist_ok=True)
        names = []
        for f in frames:
            name = f"depth/{f.timestamp:.6f}.png"
            write_depth_png(f.depth, root / name)
            names.append((f.timestamp, name))
        (root / "depth.txt").write_text(
            "# timestamp filename\n" + "".join(f"{ts:.6f} {name}\n" for ts, name in names)
        )
        (root / "associations.txt").unlink(missing_ok=True)
        write_intrinsics(k, root / "intrinsics.txt")
        if groundtruth is not None:
            write_trajectory(groundtruth, root / "groundtruth.txt")
        if scene_manifest is not None:
            (root / "scene.txt").write_text(scene_manifest)
    except OSError as exc:
        raise OSError(f"{exc.filename or root}: {exc.strerror or exc}") from exc
    return root


# ---------------------------------------------------------------- run config


@dataclass
class InitializerSpec:
    """Which coarse initializer to use; see :mod:`tsdftrack.initializer`."""

    kind: str = "identity"
    rot_noise_deg: float = 0.0
    trans_noise_cm: float = 0.0
    seed: int = 0
    path: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in ("identity", "constant_velocity", "oracle", "external"):
            raise ValueError(f"unknown initializer kind {self.kind!r}")
        if self.rot_noise_deg < 0 or self.trans_noise_cm < 0:
            raise ValueError("initializer noise must be non-negative")
        if self.kind == "external" and not self.path:
            raise ValueError("external initializer needs initializer.path")


@dataclass
class RunConfig:
    tsdf: TsdfConfig = field(default_factory=TsdfConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    initializer: InitializerSpec = field(default_factory=InitializerSpec)
    seed: int = 0
    dataset: Optional[str] = None
    output_dir: Optional[str] = None


def _parse_vec(s: str, n: int) -> tuple:
    parts = s.replace(",", " ").split()
    if len(parts) != n:
        raise ValueError(f"expected {n} numbers, got {len(parts)}")
    return tuple(float(p) for p in parts)


def _parse_fraction(s: str) -> float:
    if "/" in s:
        num, den = s.split("/", 1)
        return float(num) / float(den)
    return float(s)


def _parse_schedule(s: str):
    out = []
    for item in s.split(","):
        count, rate = item.strip().split(":")
        out.append((int(count), _parse_fraction(rate.strip())))
    return tuple(out)


def _fmt_fraction(r: float) -> str:
    inv = 1.0 / r
    if abs(inv - round(inv)) < 1e-9:
        return f"1/{int(round(inv))}"
    return repr(r)


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _opt_str(s: str) -> Optional[str]:
    return None if s.lower() in ("", "none") else s


def _opt_float(s: str) -> Optional[float]:
    return None if s.lower() in ("", "none", "auto") else float(s)


def _opt_vec3(s: str):
    return None if s.lower() in ("", "none", "auto") else _parse_vec(s, 3)


# key -> (section, attribute, parser)
_KEYS = {
    "tsdf.voxel_size": ("tsdf", "voxel_size", float),
    "tsdf.dims": ("tsdf", "dims", lambda s: tuple(int(v) for v in _parse_vec(s, 3))),
    "tsdf.origin": ("tsdf", "origin", _opt_vec3),
    "tsdf.trunc_margin": ("tsdf", "trunc_margin", _opt_float),
    "tsdf.max_weight": ("tsdf", "max_weight", float),
    "tsdf.max_depth": ("tsdf", "max_depth", float),
    "tsdf.memory_budget": ("tsdf", "memory_budget", int),
    "tracker.initial_search": ("tracker", "initial_search", lambda s: SearchSize(*_parse_vec(s, 2))),
    "tracker.beta": ("tracker", "beta", float),
    "tracker.schedule": ("tracker", "schedule", _parse_schedule),
    "tracker.max_iters": ("tracker", "max_iters", int),
    "tracker.min_search": ("tracker", "min_search", lambda s: SearchSize(*_parse_vec(s, 2))),
    "tracker.min_valid_fraction": ("tracker", "min_valid_fraction", float),
    "tracker.stall_limit": ("tracker", "stall_limit", int),
    "initializer.kind": ("initializer", "kind", str),
    "initializer.rot_noise_deg": ("initializer", "rot_noise_deg", float),
    "initializer.trans_noise_cm": ("initializer", "trans_noise_cm", float),
    "initializer.seed": ("initializer", "seed", int),
    "initializer.path": ("initializer", "path", _opt_str),
    "seed": (None, "seed", int),
    "dataset": (None, "dataset", _opt_str),
    "output_dir": (None, "output_dir", _opt_str),
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    settings: Dict[str, tuple] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise FormatError(f"{source}:{lineno}: unknown key {key!r}")
        if key in settings:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            settings[key] = (_KEYS[key][2](value), lineno)
        except (ValueError, TypeError) as exc:
            raise FormatError(f"{source}:{lineno}: bad value for {key}: {exc}") from None

    sections: Dict[Optional[str], dict] = {"tsdf": {}, "tracker": {}, "initializer": {}, None: {}}
    lines: Dict[Optional[str], int] = {}
    for key, (value, lineno) in settings.items():
        section, attr, _ = _KEYS[key]
        sections[section][attr] = value
        lines.setdefault(section, lineno)
    try:
        tsdf_cfg = TsdfConfig(**sections["tsdf"])
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{source}:{lines.get('tsdf', 0)}: invalid tsdf settings: {exc}") from None
    try:
        tracker_cfg = TrackerConfig(**sections["tracker"])
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{source}:{lines.get('tracker', 0)}: invalid tracker settings: {exc}") from None
    init = InitializerSpec(**sections["initializer"])
    try:
        init.validate()
    except ValueError as exc:
        raise FormatError(f"{source}:{lines.get('initializer', 0)}: {exc}") from None
    return RunConfig(tsdf_cfg, tracker_cfg, init, **sections[None])


def read_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    return parse_config(text, str(path))


def format_config(cfg: RunConfig) -> str:
    t, r, i = cfg.tsdf, cfg.tracker, cfg.initializer

    def opt(v):
        return "none" if v is None else v

    def vec(v):
        return "auto" if v is None else " ".join(repr(float(x)) for x in v)

    rows = [
        ("tsdf.voxel_size", repr(t.voxel_size)),
        ("tsdf.dims", " ".join(str(d) for d in t.dims)),
        ("tsdf.origin", vec(t.origin)),
        ("tsdf.trunc_margin", repr(t.trunc_margin)),
        ("tsdf.max_weight", repr(t.max_weight)),
        ("tsdf.max_depth", repr(t.max_depth)),
        ("tsdf.memory_budget", str(t.memory_budget)),
        ("tracker.initial_search", f"{r.initial_search.omega_deg!r} {r.initial_search.v_cm!r}"),
        ("tracker.beta", repr(r.beta)),
        ("tracker.schedule", ", ".join(f"{k}:{_fmt_fraction(rate)}" for k, rate in r.schedule)),
        ("tracker.max_iters", str(r.max_iters)),
        ("tracker.min_search", f"{r.min_search.omega_deg!r} {r.min_search.v_cm!r}"),
        ("tracker.min_valid_fraction", repr(r.min_valid_fraction)),
        ("tracker.stall_limit", str(r.stall_limit)),
        ("initializer.kind", i.kind),
        ("initializer.rot_noise_deg", repr(i.rot_noise_deg)),
        ("initializer.trans_noise_cm", repr(i.trans_noise_cm)),
        ("initializer.seed", str(i.seed)),
        ("initializer.path", opt(i.path)),
        ("seed", str(cfg.seed)),
        ("dataset", opt(cfg.dataset)),
        ("output_dir", opt(cfg.output_dir)),
    ]
    return "".join(f"{k} = {v}\n" for k, v in rows)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(format_config(cfg))


# ---------------------------------------------------------------- volumes


def save_volume(vol, path) -> None:
    """Values, weights and grid geometry as a compressed ``.npz``."""
    c = vol.config
    np.savez_compressed(
        path, values=vol.values, weights=vol.weights, origin=np.asarray(c.origin),
        voxel_size=c.voxel_size, trunc_margin=c.trunc_margin, max_weight=c.max_weight, max_depth=c.max_depth,
    )


def load_volume(path):
    from .tsdf import TsdfVolume

    try:
        with np.load(path) as z:
            values, weights = z["values"], z["weights"]
            cfg = TsdfConfig(voxel_size=float(z["voxel_size"]), dims=values.shape, origin=tuple(z["origin"]),
                             trunc_margin=float(z["trunc_margin"]), max_weight=float(z["max_weight"]),
                             max_depth=float(z["max_depth"]), memory_budget=1 << 62)
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a saved volume ({exc})") from exc
    vol = TsdfVolume(cfg)
    vol.set_field(values, weights)
    return vol
