import subprocess
import sys

import numpy as np
import pytest

from tsdftrack import io as tio
from tsdftrack.cli import main
from tsdftrack.pipeline import format_trace_csv, run_fusion

CONFIG = ("tsdf.voxel_size = 0.04\ntsdf.dims = 96 96 96\n"
          "tracker.schedule = 256:1/8\ntracker.max_iters = 4\nseed = 5\n")


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth", str(out), "--frames", "5", "--width", "80", "--height", "60"]) == 0
    return out


@pytest.fixture(scope="module")
def fuse_dir(synth_dir):
    cfg = synth_dir.parent / "run.cfg"
    cfg.write_text(CONFIG)
    out = synth_dir.parent / "out"
    assert main(["fuse", str(synth_dir), str(out), "--config", str(cfg)]) == 0
    return out


def test_synth_layout(synth_dir, capsys):
    for name in ("depth.txt", "intrinsics.txt", "groundtruth.txt", "scene.txt"):
        assert (synth_dir / name).exists()
    assert len(list((synth_dir / "depth").glob("*.png"))) == 5


def test_fuse_outputs(fuse_dir):
    traj = tio.read_trajectory(fuse_dir / "trajectory.txt")
    assert len(traj) == 5
    stats = (fuse_dir / "stats.txt").read_text()
    assert "fps = " in stats and "mean_ms_refine = " in stats
    for name in ("surface.ply", "trace.csv", "timing.csv", "volume.npz", "fuse.cfg"):
        assert (fuse_dir / name).exists()


def test_cli_matches_in_process(synth_dir, fuse_dir):
    res = run_fusion(tio.read_dataset(synth_dir), tio.parse_config(CONFIG))
    assert tio.format_trajectory(res.trajectory) == (fuse_dir / "trajectory.txt").read_text()
    assert format_trace_csv(res.stats) == (fuse_dir / "trace.csv").read_text()


def test_eval_ate_self(fuse_dir, capsys):
    t = str(fuse_dir / "trajectory.txt")
    assert main(["eval-ate", t, t]) == 0
    assert capsys.readouterr().out.strip() == "0.00 cm"


def test_eval_ate_against_groundtruth(fuse_dir, synth_dir, capsys):
    assert main(["eval-ate", str(fuse_dir / "trajectory.txt"), str(synth_dir / "groundtruth.txt")]) == 0
    value = float(capsys.readouterr().out.split()[0])
    assert value >= 0


def test_eval_recon_and_export(fuse_dir, synth_dir, capsys):
    ply = fuse_dir / "exported.ply"
    assert main(["export", str(fuse_dir / "volume.npz"), str(ply)]) == 0
    assert np.array_equal(tio.read_ply(ply).points, tio.read_ply(fuse_dir / "surface.ply").points)
    capsys.readouterr()
    assert main(["eval-recon", str(ply), str(synth_dir / "scene.txt"), "--sample-voxel", "0.04",
                 "--trajectory", str(fuse_dir / "trajectory.txt"),
                 "--groundtruth", str(synth_dir / "groundtruth.txt"), "--dataset", str(synth_dir)]) == 0
    out = dict(line.split(" = ") for line in capsys.readouterr().out.strip().splitlines())
    assert 0 <= float(out["completeness"]) <= 100 and float(out["accuracy_cm"]) >= 0
    assert out["threshold_cm"] == "10"


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["eval-ate", "a", "b", "--bogus"])
    assert e.value.code == 2
    assert main(["fuse"]) == 2


def test_machine_parsable_errors(tmp_path, capsys):
    assert main(["eval-ate", str(tmp_path / "nope.txt"), str(tmp_path / "nope.txt")]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: format: ")
    bad = tmp_path / "bad.cfg"
    bad.write_text("tracker.beta = 1.5\n")
    assert main(["fuse", str(tmp_path), str(tmp_path / "o"), "--config", str(bad)]) == 1
    assert capsys.readouterr().err.startswith("error: format: ")


def test_console_entry_point(tmp_path):
    t = tmp_path / "t.txt"
    t.write_text("0 0 0 0 0 0 0 1\n1 1 0 0 0 0 0 1\n2 2 1 0 0 0 0 1\n")
    r = subprocess.run([sys.executable, "-m", "tsdftrack.cli", "eval-ate", str(t), str(t)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "0.00 cm"
