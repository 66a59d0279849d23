"""Trajectory and reconstruction error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Sim3Pose

MAX_TIME_GAP = 0.02


class EvaluationError(ValueError):
    pass


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> Sim3Pose:
    """Least-squares similarity (or rigid) transform with ``dst ~ s R src + t``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3 or src.shape != dst.shape:
        raise EvaluationError("need at least three paired points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - mu_s, dst - mu_d
    cov = b.T @ a / len(src)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    if with_scale:
        var = np.mean(np.sum(a * a, axis=1))
        if var <= 0:
            raise EvaluationError("degenerate source point set")
        s = float(np.trace(np.diag(S) @ D) / var)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return Sim3Pose(R, t, s)


def associate_timestamps(ts_est: np.ndarray, ts_gt: np.ndarray, max_gap: float = MAX_TIME_GAP):
    """Greedy nearest-timestamp pairing, each ground-truth stamp used once."""
    ts_est = np.asarray(ts_est, dtype=float)
    ts_gt = np.asarray(ts_gt, dtype=float)
    if len(ts_est) == 0 or len(ts_gt) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    order = np.argsort(ts_gt)
    sg = ts_gt[order]
    pos = np.clip(np.searchsorted(sg, ts_est), 1, len(sg) - 1) if len(sg) > 1 else np.zeros(len(ts_est), int)
    cand = []
    for i, p in enumerate(pos):
        for j in {p - 1, p} if len(sg) > 1 else {0}:
            gap = abs(sg[j] - ts_est[i])
            if gap <= max_gap:
                cand.append((gap, i, int(order[j])))
    cand.sort()
    used_e, used_g, out = set(), set(), []
    for _, i, j in cand:
        if i in used_e or j in used_g:
            continue
        used_e.add(i)
        used_g.add(j)
        out.append((i, j))
    out.sort()
    return np.array(out, dtype=np.int64).reshape(-1, 2)


@dataclass
class ATEResult:
    rmse: float
    errors: np.ndarray
    alignment: Sim3Pose
    pairs: np.ndarray


def evaluate_ate(
    ts_est: np.ndarray,
    pos_est: np.ndarray,
    ts_gt: np.ndarray,
    pos_gt: np.ndarray,
    alignment: str = "sim3",
    max_gap: float = MAX_TIME_GAP,
) -> ATEResult:
    """Translational RMSE after closed-form alignment of estimate onto ground truth.

    ``alignment`` is ``"sim3"`` or ``"se3"``.

    Raises:
        EvaluationError: fewer than three timestamps pair up.
    """
    if alignment not in ("sim3", "se3"):
        raise EvaluationError(f"unknown alignment {alignment!r}")
    pairs = associate_timestamps(ts_est, ts_gt, max_gap)
    if len(pairs) < 3:
        raise EvaluationError(f"only {len(pairs)} matched timestamps")
    a = np.asarray(pos_est, dtype=float)[pairs[:, 0]]
    b = np.asarray(pos_gt, dtype=float)[pairs[:, 1]]
    S = umeyama(a, b, with_scale=alignment == "sim3")
    err = np.linalg.norm(S.apply(a) - b, axis=1)
    return ATEResult(float(np.sqrt(np.mean(err**2))), err, S, pairs)


@dataclass
class ReconstructionResult:
    rmse: float
    distances: np.ndarray
    thresholds: np.ndarray
    cumulative: np.ndarray  # fraction of points within each threshold


def evaluate_reconstruction(
    points: np.ndarray, gt_cloud: np.ndarray, alignment: Sim3Pose | None = None, thresholds=None, min_points: int = 10
) -> ReconstructionResult:
    """Nearest-neighbor distance of aligned map points to a ground-truth cloud.

    Raises:
        EvaluationError: fewer than ``min_points`` map points.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < min_points:
        raise EvaluationError(f"{len(points)} map points, need {min_points}")
    if alignment is not None:
        points = alignment.apply(points)
    d, _ = cKDTree(np.asarray(gt_cloud, dtype=float)).query(points)
    if thresholds is None:
        hi = max(float(d.max()), 1e-12)
        thresholds = np.linspace(0.0, hi, 51)
    thresholds = np.asarray(thresholds, dtype=float)
    cum = np.array([(d <= t).mean() for t in thresholds])
    return ReconstructionResult(float(np.sqrt(np.mean(d**2))), d, thresholds, cum)
