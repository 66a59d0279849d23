"""Command-line entry point.

Every command takes one config file plus any number of ``--override key=value``.
Exit codes: 0 success, 2 bootstrap failure, 3 tracking lost, 4 I/O or input error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .evaluation import EvaluationError, evaluate_ate, evaluate_reconstruction
from .pipeline import BootstrapFailure, TrackingFailure, run_pipeline

EXIT_OK = 0
EXIT_BOOTSTRAP = 2
EXIT_LOST = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_IO, f"{self.prog}: error: {message}\n")


def _emit(stats: dict, cfg):
    text = fileio.format_report(stats)
    sys.stdout.write(text)
    if cfg.output.stats:
        Path(cfg.output.stats).write_text(text)


def cmd_run(cfg) -> int:
    """Track, map and (optionally) close loops over a feature directory or synthetic world."""
    try:
        out = run_pipeline(cfg)
    except TrackingFailure as exc:
        stats = dict(getattr(exc, "output", None).stats) if getattr(exc, "output", None) else {}
        stats["lost_at_frame"] = exc.frame_index
        stats["error"] = str(exc)
        sys.stdout.write(fileio.format_report(stats))
        if cfg.output.stats:
            Path(cfg.output.stats).write_text(fileio.format_report(stats))
        return EXIT_LOST
    sys.stdout.write(fileio.format_report(out.stats))
    return EXIT_OK


def cmd_synth(cfg) -> int:
    """Render the configured world into a feature directory with ground truth and a run config."""
    from .pipeline import synthetic_frames
    from .synth import generate_world

    if cfg.input == "synthetic":
        raise fileio.ConfigError("set input to the directory the feature files should go to")
    gt = generate_world(cfg.synth)
    out = Path(cfg.input)
    n = fileio.write_feature_directory(out, synthetic_frames(gt))
    gt_path = Path(cfg.eval.groundtruth) if cfg.eval.groundtruth else out / "groundtruth.txt"
    cloud_path = Path(cfg.eval.cloud) if cfg.eval.cloud else out / "cloud.txt"
    fileio.write_trajectory(gt_path, fileio.TrajectoryEstimate.from_poses(gt.timestamps, gt.poses))
    fileio.write_points(cloud_path, gt.landmarks)
    K = gt.K
    run_cfg = [
        "input = .",
        f"mode = {cfg.mode}",
        f"loop = {cfg.loop}",
        f"camera.fx = {K.fx!r}",
        f"camera.fy = {K.fy!r}",
        f"camera.cx = {K.cx!r}",
        f"camera.cy = {K.cy!r}",
        f"camera.width = {K.width}",
        f"camera.height = {K.height}",
        "output.trajectory = estimate.txt",
        "output.map = map.txt",
        "output.stats = stats.txt",
        "eval.estimate = estimate.txt",
        f"eval.groundtruth = {gt_path.resolve()}",
        f"eval.cloud = {cloud_path.resolve()}",
        "eval.points = map.txt",
    ]
    (out / "run.cfg").write_text("\n".join(run_cfg) + "\n")
    _emit({"frames_written": n, "directory": str(out), "landmarks": len(gt.landmarks)}, cfg)
    return EXIT_OK


def cmd_eval_ate(cfg) -> int:
    """Aligned absolute trajectory error of an estimate against ground truth."""
    est = fileio.read_trajectory(cfg.eval.estimate)
    ref = fileio.read_trajectory(cfg.eval.groundtruth)
    res = evaluate_ate(est.timestamps, est.positions, ref.timestamps, ref.positions, cfg.eval.alignment, cfg.eval.max_gap)
    if cfg.output.table:
        ts = est.timestamps[res.pairs[:, 0]]
        fileio.write_table(cfg.output.table, ["timestamp", "error"], [[float(t), float(e)] for t, e in zip(ts, res.errors)])
    _emit(
        {
            "ate_rmse": res.rmse,
            "alignment": cfg.eval.alignment,
            "matched": len(res.pairs),
            "scale": res.alignment.s,
            "max_error": float(res.errors.max()),
        },
        cfg,
    )
    return EXIT_OK


def cmd_eval_recon(cfg) -> int:
    """Nearest-neighbour error of estimated map points against a reference cloud."""
    pts = fileio.read_points(cfg.eval.points)
    cloud = fileio.read_points(cfg.eval.cloud)
    align = None
    if cfg.eval.estimate and cfg.eval.groundtruth:
        est = fileio.read_trajectory(cfg.eval.estimate)
        ref = fileio.read_trajectory(cfg.eval.groundtruth)
        align = evaluate_ate(est.timestamps, est.positions, ref.timestamps, ref.positions, cfg.eval.alignment, cfg.eval.max_gap).alignment
    res = evaluate_reconstruction(pts, cloud, align)
    if cfg.output.table:
        fileio.write_table(cfg.output.table, ["distance", "fraction"], [[float(t), float(c)] for t, c in zip(res.thresholds, res.cumulative)])
    _emit({"recon_rmse": res.rmse, "points": len(pts), "median_distance": float(np.median(res.distances))}, cfg)
    return EXIT_OK


def cmd_track_ablation(cfg) -> int:
    """Convergence of direct tracking from a grid of initial offsets, with and without the coarse level."""
    from dataclasses import replace

    from .experiments import run_convergence_experiment
    from .synth import generate_world

    e = cfg.experiment
    worlds = [generate_world(replace(cfg.synth, seed=cfg.synth.seed + s)) for s in range(e.seeds)]
    res = run_convergence_experiment(
        worlds, grid=e.grid, max_fraction=e.max_fraction, target=e.target_frame, success_fraction=e.success_fraction,
        min_probability=cfg.min_probability, nms_radius=cfg.nms_radius,
    )
    if cfg.output.table:
        fileio.write_table(cfg.output.table, *res.table())
    stats = {}
    for q in res.sequences:
        stats[f"sequence{q}_coarse_to_fine"] = res.successes(q, True)
        stats[f"sequence{q}_fine_only"] = res.successes(q, False)
    stats["trials_per_mode"] = e.grid * e.grid
    _emit(stats, cfg)
    return EXIT_OK


def cmd_param_ablation(cfg) -> int:
    """Bundle adjustment accuracy under each keypoint location and covariance mode."""
    from .experiments import run_parameterization_experiment

    e = cfg.experiment
    res = run_parameterization_experiment(
        range(cfg.synth.seed, cfg.synth.seed + e.worlds), anisotropic=not e.isotropic, adjacent=e.adjacent,
        frames=e.frames, landmarks=e.landmarks, anisotropy=e.anisotropy, noise=e.noise,
    )
    if cfg.output.table:
        fileio.write_table(cfg.output.table, *res.table())
    stats = {}
    for m in res.ate:
        lo, hi = res.ci95(m)
        stats[f"{m.value}_mean_ate"] = res.mean(m)
        stats[f"{m.value}_ci95"] = f"{lo:.6g}..{hi:.6g}"
        stats[f"{m.value}_improvement_vs_EI"] = res.improvement(m)
    _emit(stats, cfg)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "synth": cmd_synth,
    "eval-ate": cmd_eval_ate,
    "eval-recon": cmd_eval_recon,
    "track-ablation": cmd_track_ablation,
    "param-ablation": cmd_param_ablation,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rdslam", description="Monocular SLAM on keypoint prediction volumes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        sp.add_argument("config", help="flat key = value config file")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = fileio.load_config(args.config, args.override)
        return COMMANDS[args.command](cfg)
    except BootstrapFailure as exc:
        print(f"bootstrap failed: {exc}", file=sys.stderr)
        return EXIT_BOOTSTRAP
    except TrackingFailure as exc:
        print(f"tracking lost at frame {exc.frame_index}: {exc}", file=sys.stderr)
        return EXIT_LOST
    except (OSError, fileio.ConfigError, EvaluationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
