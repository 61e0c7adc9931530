"""Command line entry point: ``tsdftrack <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import io as tio
from .camera import Intrinsics
from .pipeline import (evaluate_reconstruction, observed_points, reference_samples, run_fusion, summary, to_reference_frame,
                       write_outputs)
from .se3 import ate_rmse_cm
from .synth import DepthNoiseModel, SceneSdf, TrajectorySpec, export_dataset, generate_trajectory, room_scene
from .tsdf import extract_surface_points


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _cmd_synth(args) -> None:
    if args.scene:
        scene = SceneSdf.from_manifest(Path(args.scene).read_text(), args.scene)
    else:
        scene = room_scene()
    drop = (args.drop_fraction, args.seed) if args.drop_fraction else None
    spec = TrajectorySpec(kind=args.kind, frame_count=args.frames, fps=args.fps, deg_per_frame=args.deg_per_frame,
                          seed=args.seed, drop=drop, stride=args.stride)
    traj = generate_trajectory(spec)
    k = Intrinsics.default(args.width, args.height)
    noise = DepthNoiseModel(args.noise_sigma, False, args.dropout, 0.0, args.seed)
    root = export_dataset(scene, traj, k, noise, args.out)
    print(f"frames = {len(traj)}")
    print(f"dataset = {root}")


def _cmd_fuse(args) -> None:
    cfg = tio.read_config(args.config) if args.config else tio.RunConfig()
    init = cfg.initializer
    if args.initializer:
        init.kind = args.initializer
    if args.guesses:
        init.kind, init.path = "external", args.guesses
    if args.rot_noise_deg is not None:
        init.rot_noise_deg = args.rot_noise_deg
    if args.trans_noise_cm is not None:
        init.trans_noise_cm = args.trans_noise_cm
    if args.seed is not None:
        cfg.seed = args.seed
    init.validate()
    dataset_path = args.dataset or cfg.dataset
    out = args.out or cfg.output_dir
    if not dataset_path or not out:
        raise CliError("usage", "fuse needs a dataset and an output directory")
    ds = tio.read_dataset(dataset_path)
    result = run_fusion(ds, cfg)
    write_outputs(result, out)
    tio.save_volume(result.volume, Path(out) / "volume.npz")
    tio.write_config(cfg, Path(out) / "fuse.cfg")
    for key, value in summary(result).items():
        print(f"{key} = {value}")


def _cmd_eval_ate(args) -> None:
    est = tio.read_trajectory(args.estimate)
    gt = tio.read_trajectory(args.groundtruth)
    if len(est) != len(gt):
        # evaluate on the ground truth entries nearest to the estimate timestamps
        idx = [int(abs(gt.timestamps - t).argmin()) for t in est.timestamps]
        if any(abs(gt.timestamps[i] - t) > tio.ASSOC_MAX_DT for i, t in zip(idx, est.timestamps)):
            raise CliError("mismatch", "trajectories cannot be associated by timestamp")
        from .se3 import Trajectory

        gt = Trajectory(est.timestamps, [gt.poses[i] for i in idx])
    print(f"{ate_rmse_cm(est, gt):.2f} cm")


def _cmd_eval_recon(args) -> None:
    est = tio.read_ply(args.ply)
    scene = SceneSdf.from_manifest(Path(args.scene).read_text(), args.scene)
    if args.trajectory and args.groundtruth:
        est = to_reference_frame(est, tio.read_trajectory(args.trajectory), tio.read_trajectory(args.groundtruth))
    visible = None
    if args.dataset:
        ds = tio.read_dataset(args.dataset)
        gt = ds.groundtruth_at_frames()
        if gt is None:
            raise CliError("invalid", f"{args.dataset}: visibility filtering needs groundtruth.txt")
        visible = observed_points(ds, gt)
    samples = reference_samples(scene, args.sample_voxel, visible)
    m = evaluate_reconstruction(est, scene, args.threshold_cm, ref_samples=samples)
    print(f"completeness = {m.completeness:.2f}")
    print(f"accuracy_cm = {m.accuracy_cm:.3f}")
    print(f"threshold_cm = {m.threshold_cm:g}")


def _cmd_export(args) -> None:
    vol = tio.load_volume(args.volume)
    pts = extract_surface_points(vol)
    tio.write_ply(pts, args.out)
    print(f"points = {len(pts)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsdftrack", description="Dense depth fusion with randomized pose tracking.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("out", help="output dataset directory")
    s.add_argument("--scene", help="scene manifest (default: built-in room)")
    s.add_argument("--kind", default="orbit", choices=["orbit", "dolly", "fast_rotation", "shake"])
    s.add_argument("--frames", type=int, default=60)
    s.add_argument("--fps", type=float, default=30.0)
    s.add_argument("--deg-per-frame", type=float, default=2.0)
    s.add_argument("--stride", type=int)
    s.add_argument("--drop-fraction", type=float, default=0.0)
    s.add_argument("--width", type=int, default=320)
    s.add_argument("--height", type=int, default=240)
    s.add_argument("--noise-sigma", type=float, default=0.0, help="Gaussian depth noise in meters")
    s.add_argument("--dropout", type=float, default=0.0, help="fraction of valid pixels to drop")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)

    f = sub.add_parser("fuse", help="track and fuse a dataset")
    f.add_argument("dataset", nargs="?")
    f.add_argument("out", nargs="?", help="output directory")
    f.add_argument("--config", help="key = value run configuration")
    f.add_argument("--initializer", choices=["identity", "constant_velocity", "oracle", "external"])
    f.add_argument("--guesses", help="relative pose guesses (implies --initializer external)")
    f.add_argument("--rot-noise-deg", type=float)
    f.add_argument("--trans-noise-cm", type=float)
    f.add_argument("--seed", type=int)
    f.set_defaults(func=_cmd_fuse)

    a = sub.add_parser("eval-ate", help="ATE-RMSE between two trajectory files")
    a.add_argument("estimate")
    a.add_argument("groundtruth")
    a.set_defaults(func=_cmd_eval_ate)

    r = sub.add_parser("eval-recon", help="completeness and accuracy of a PLY against a scene manifest")
    r.add_argument("ply")
    r.add_argument("scene")
    r.add_argument("--threshold-cm", type=float, default=10.0)
    r.add_argument("--sample-voxel", type=float, default=0.01, help="reference sampling resolution in meters")
    r.add_argument("--trajectory", help="estimated trajectory, to align the PLY with --groundtruth")
    r.add_argument("--groundtruth")
    r.add_argument("--dataset", help="restrict the reference to surface seen by this dataset's frames")
    r.set_defaults(func=_cmd_eval_recon)

    e = sub.add_parser("export", help="extract the surface of a saved volume to PLY")
    e.add_argument("volume", help="volume.npz written by fuse")
    e.add_argument("out", help="output PLY")
    e.set_defaults(func=_cmd_export)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        if exc.kind == "usage":
            parser.print_usage(sys.stderr)
            print(f"error: usage: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except tio.FormatError as exc:
        print(f"error: format: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, RuntimeError) as exc:
        print(f"error: invalid: {exc}", file=sys.stderr)
        return 1
    except MemoryError as exc:
        print(f"error: memory: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
