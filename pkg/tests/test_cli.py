import subprocess
import sys

import pytest

from rdslam import cli, fileio


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_synth_run_and_evaluate(tmp_path, capsys):
    data = tmp_path / "data"
    cfg = _write(tmp_path, f"input = {data}\nsynth.n_frames = 30\nsynth.n_landmarks = 800\nsynth.seed = 1\n")
    assert cli.main(["synth", cfg]) == 0
    run_cfg = str(data / "run.cfg")
    assert cli.main(["run", run_cfg]) == 0
    stats = fileio.parse_report((data / "stats.txt").read_text())
    assert stats["tracked"] == 30
    capsys.readouterr()
    assert cli.main(["eval-ate", run_cfg, "--override", f"output.table={tmp_path}/ate.csv"]) == 0
    ate = fileio.parse_report(capsys.readouterr().out)
    assert ate["matched"] == 30 and ate["ate_rmse"] < 0.01 * 10.0
    assert (tmp_path / "ate.csv").read_text().startswith("timestamp,error\n")
    assert cli.main(["eval-recon", run_cfg]) == 0
    rec = fileio.parse_report(capsys.readouterr().out)
    assert rec["points"] == stats["landmarks"] and rec["median_distance"] < 0.1


def test_bootstrap_failure_exit_code(tmp_path):
    cfg = _write(tmp_path, "synth.n_frames = 1\nsynth.n_landmarks = 200\n")
    assert cli.main(["run", cfg]) == 2


def test_tracking_lost_exit_code(tmp_path, capsys):
    import numpy as np

    from rdslam.pipeline import synthetic_frames
    from rdslam.synth import WorldSpec, generate_world, render_prediction, with_landmarks

    gt = generate_world(WorldSpec(seed=5, n_landmarks=1000, n_frames=16))
    frames = list(synthetic_frames(gt))
    empty = with_landmarks(gt, gt.poses[12].inverse().apply(np.tile([0.0, 0.0, -5.0], (1000, 1))))
    frames[12] = (12, frames[12][1], render_prediction(empty, 12))
    fileio.write_feature_directory(tmp_path / "f", frames)
    K = gt.K
    cfg = _write(
        tmp_path,
        f"input = f\ncamera.fx = {K.fx}\ncamera.fy = {K.fy}\ncamera.cx = {K.cx}\ncamera.cy = {K.cy}\n"
        f"camera.width = {K.width}\ncamera.height = {K.height}\noutput.stats = stats.txt\noutput.trajectory = est.txt\n",
    )
    assert cli.main(["run", cfg]) == 3
    stats = fileio.parse_report((tmp_path / "stats.txt").read_text())
    assert stats["lost_at_frame"] == 12
    assert len(fileio.read_trajectory(tmp_path / "est.txt").timestamps) == 12


@pytest.mark.parametrize(
    "argv,text",
    [
        (["run", "{missing}"], None),
        (["run", "{cfg}"], "mode = ZZ\n"),
        (["run", "{cfg}", "--override", "bogus.key=1"], ""),
        (["eval-ate", "{cfg}"], "eval.estimate = nope.txt\neval.groundtruth = nope.txt\n"),
        (["frobnicate", "{cfg}"], ""),
        ([], None),
    ],
)
def test_usage_and_io_errors_exit_4(tmp_path, argv, text):
    cfg = _write(tmp_path, text) if text is not None else str(tmp_path / "run.cfg")
    argv = [a.format(cfg=cfg, missing=tmp_path / "missing.cfg") for a in argv]
    with pytest.raises(SystemExit) as info:
        sys.exit(cli.main(argv))
    assert info.value.code == 4


def test_feature_input_needs_intrinsics(tmp_path):
    (tmp_path / "f").mkdir()
    (tmp_path / "f" / fileio.INDEX_NAME).write_text("")
    assert cli.main(["run", _write(tmp_path, "input = f\n")]) == 4


def test_help_lists_every_command():
    out = subprocess.run([sys.executable, "-m", "rdslam.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for name in cli.COMMANDS:
        assert name in out.stdout
