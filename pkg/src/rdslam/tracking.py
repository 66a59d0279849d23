"""Frame-rate pose tracking against a sparse landmark set.

The pipeline per frame is: constant-velocity prediction, direct alignment on
the patch-wise repeatability map, direct alignment on the pixel-wise map,
grid-local association of landmarks to keypoints, and covariance-weighted
reprojection refinement with chi-square outlier rejection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import CELL, KeypointSet, ParamMode, RepeatabilityMaps, bilinear
from .geometry import (
    CameraIntrinsics,
    Pose,
    apply_increment,
    exp_se3,
    log_se3,
    point_twist_jacobian,
    project_points,
    projection_jacobian,
)
from .solver import Policy, RobustKernel, SolveOptions, SolveReport, solve

MIN_LANDMARKS = 10
CHI2_2DOF = 5.991
COARSE_DELTA = 0.35
FINE_DELTA = 2.0
REPROJ_DELTA = float(np.sqrt(CHI2_2DOF))
MAX_DESCRIPTOR_DISTANCE = 1.0


class TrackingLost(RuntimeError):
    pass


@dataclass
class VelocityModel:
    twist: np.ndarray = field(default_factory=lambda: np.zeros(6))

    @classmethod
    def between(cls, previous: Pose, current: Pose) -> "VelocityModel":
        """Increment ``v`` with ``current == exp(v) @ previous``."""
        return cls(log_se3(current @ previous.inverse()))


def predict_pose(velocity: VelocityModel, last_pose: Pose) -> Pose:
    return apply_increment(velocity.twist, last_pose)


@dataclass
class TrackedMatch:
    landmark: int
    keypoint: int
    reprojection: np.ndarray
    inlier: bool = True


class RepeatabilityAlignment:
    """Direct alignment residuals ``r_i = map(project(exp(xi) T x_i))``.

    At the coarse level the map is the patch-wise no-keypoint probability,
    sampled at cell-center coordinates ``(u - (C-1)/2) / C``; at the fine
    level it is the pixel-wise negative log probability. Landmarks outside
    the interpolation domain get zero Jacobian and a saturated residual
    (the map maximum), so leaving the image is never rewarded.
    """

    def __init__(self, image: np.ndarray, landmarks: np.ndarray, K: CameraIntrinsics, coarse: bool, cell: int = CELL):
        self.image = np.asarray(image, dtype=float)
        self.X = np.asarray(landmarks, dtype=float).reshape(-1, 3)
        self.K = K
        self.coarse = coarse
        self.cell = cell
        self.margin = 1.0
        finite = self.image[np.isfinite(self.image)]
        self.outside = float(finite.max()) if finite.size else 0.0
        self.last_valid = np.zeros(len(self.X), dtype=bool)

    def coords(self, uv: np.ndarray) -> np.ndarray:
        if self.coarse:
            return (uv - 0.5 * (self.cell - 1)) / self.cell
        return uv

    def evaluate(self, pose: Pose, jacobian: bool = True):
        Xc = pose.apply(self.X)
        uv, front = project_points(self.K, Xc)
        c = self.coords(uv)
        val, grad, valid = bilinear(self.image, np.where(front[:, None], c, np.nan), self.margin)
        valid &= front
        self.last_valid = valid
        r = np.where(valid, val, self.outside)[:, None]
        if not jacobian:
            return r, None
        J = np.zeros((len(self.X), 6))
        if valid.any():
            Xv = Xc[valid]
            Jp = projection_jacobian(self.K, Xv)
            Jx = point_twist_jacobian(Xv)
            g = grad[valid]
            if self.coarse:
                g = g / self.cell
            J[valid] = np.einsum("ni,nij,njk->nk", g, Jp, Jx)
        return r, J

    def retract(self, pose: Pose, delta: np.ndarray) -> Pose:
        return apply_increment(delta, pose)


def _align(maps_image, landmarks, init, K, coarse, delta, opts, cell=CELL):
    X = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    if len(X) < MIN_LANDMARKS:
        raise TrackingLost(f"only {len(X)} landmarks available")
    problem = RepeatabilityAlignment(maps_image, X, K, coarse, cell)
    opts = opts or SolveOptions(max_iterations=30, update_tolerance=1e-6, policy=Policy.GN)
    pose, report = solve(problem, init, RobustKernel("huber", delta), opts)
    problem.evaluate(pose, jacobian=False)
    n_valid = int(problem.last_valid.sum())
    if n_valid < MIN_LANDMARKS:
        raise TrackingLost(f"only {n_valid} landmarks in view after alignment")
    return pose, report


def track_coarse(maps: RepeatabilityMaps, landmarks, init: Pose, K: CameraIntrinsics, opts=None, delta=COARSE_DELTA):
    """Align on the patch-wise map. Returns ``(pose, SolveReport)``."""
    return _align(maps.patchwise, landmarks, init, K, True, delta, opts, maps.cell)


def track_fine(maps: RepeatabilityMaps, landmarks, init: Pose, K: CameraIntrinsics, opts=None, delta=FINE_DELTA):
    """Align on the pixel-wise negative-log map. Returns ``(pose, SolveReport)``."""
    return _align(maps.pixelwise, landmarks, init, K, False, delta, opts, maps.cell)


def track_direct(maps: RepeatabilityMaps, landmarks, init: Pose, K: CameraIntrinsics, coarse_to_fine: bool = True):
    pose = init
    reports = []
    if coarse_to_fine:
        pose, rep = track_coarse(maps, landmarks, pose, K)
        reports.append(rep)
    pose, rep = track_fine(maps, landmarks, pose, K)
    reports.append(rep)
    return pose, reports


def adjacent_cells(uv: np.ndarray, grid_shape: tuple[int, int], cell: int = CELL) -> np.ndarray:
    """The 2x2 block of cells whose centers surround each pixel, ``(N, 4, 2)`` as (col, row)."""
    hc, wc = grid_shape
    c = (uv - 0.5 * (cell - 1)) / cell
    x0 = np.floor(c[:, 0]).astype(int)
    y0 = np.floor(c[:, 1]).astype(int)
    xs = np.stack([x0, x0 + 1, x0, x0 + 1], axis=1)
    ys = np.stack([y0, y0, y0 + 1, y0 + 1], axis=1)
    return np.stack([xs, ys], axis=-1)


def associate(
    pose: Pose,
    landmark_ids: np.ndarray,
    positions: np.ndarray,
    descriptors: np.ndarray,
    keypoints: KeypointSet,
    K: CameraIntrinsics,
    max_distance: float = MAX_DESCRIPTOR_DISTANCE,
) -> list[TrackedMatch]:
    """Grid-local landmark-to-keypoint association.

    A landmark with a single keypoint among its four adjacent cells takes it
    directly; with several, the nearest descriptor wins if it is closer than
    ``max_distance``. A keypoint claimed by several landmarks goes to the one
    with the smallest descriptor distance.
    """
    n = len(positions)
    if n == 0 or len(keypoints) == 0:
        return []
    hc, wc = keypoints.grid.shape
    uv, front = project_points(K, pose.apply(positions))
    front &= K.in_image(np.nan_to_num(uv, nan=-1e9))
    uvs = np.where(front[:, None], uv, 0.0)
    cells = adjacent_cells(uvs, (hc, wc), keypoints.cell)
    inside = (cells[..., 0] >= 0) & (cells[..., 0] < wc) & (cells[..., 1] >= 0) & (cells[..., 1] < hc)
    cand = np.full((n, 4), -1)
    cx = np.clip(cells[..., 0], 0, wc - 1)
    cy = np.clip(cells[..., 1], 0, hc - 1)
    cand[inside] = keypoints.grid[cy[inside], cx[inside]]
    cand[~front] = -1
    has = cand >= 0
    dist = np.full((n, 4), np.inf)
    if has.any():
        dots = np.einsum("nd,nd->n", np.repeat(descriptors, 4, axis=0)[has.ravel()], keypoints.descriptors[cand[has]])
        dist[has] = np.sqrt(np.maximum(2.0 - 2.0 * dots, 0.0))
    count = has.sum(axis=1)
    best = np.argmin(dist, axis=1)
    best_d = dist[np.arange(n), best]
    chosen = cand[np.arange(n), best]
    ok = (count == 1) | ((count > 1) & (best_d < max_distance))
    ok &= chosen >= 0
    idx = np.flatnonzero(ok)
    # injectivity: smallest descriptor distance keeps the keypoint
    order = idx[np.lexsort((idx, best_d[idx]))]
    taken: set[int] = set()
    matches = []
    for i in order:
        kp = int(chosen[i])
        if kp in taken:
            continue
        taken.add(kp)
        matches.append(TrackedMatch(int(landmark_ids[i]), kp, uv[i].copy()))
    matches.sort(key=lambda m: m.landmark)
    return matches


def whitening(covs: np.ndarray) -> np.ndarray:
    """``W`` with ``W^T W = inv(cov)``, batched."""
    L = np.linalg.cholesky(covs)
    return np.linalg.inv(L)


class ReprojectionPose:
    """Whitened reprojection residuals for a single pose."""

    def __init__(self, X: np.ndarray, u: np.ndarray, covs: np.ndarray, K: CameraIntrinsics):
        self.X = X
        self.u = u
        self.W = whitening(covs)
        self.K = K

    def errors(self, pose: Pose) -> np.ndarray:
        uv, front = project_points(self.K, pose.apply(self.X))
        return np.where(front[:, None], uv - self.u, 1e6)

    def evaluate(self, pose: Pose, jacobian: bool = True):
        Xc = pose.apply(self.X)
        uv, front = project_points(self.K, Xc)
        e = np.where(front[:, None], uv - self.u, 1e6)
        r = np.einsum("nij,nj->ni", self.W, e)
        if not jacobian:
            return r, None
        Jp = projection_jacobian(self.K, np.where(front[:, None], Xc, 1.0))
        J = np.einsum("nij,njk,nkl->nil", self.W, Jp, point_twist_jacobian(Xc))
        J[~front] = 0.0
        return r, J.reshape(-1, 6)

    def retract(self, pose: Pose, delta: np.ndarray) -> Pose:
        return apply_increment(delta, pose)

    def chi2(self, pose: Pose) -> np.ndarray:
        r, _ = self.evaluate(pose, jacobian=False)
        return np.sum(r * r, axis=1)


def refine_pose(
    X: np.ndarray,
    u: np.ndarray,
    covs: np.ndarray,
    init: Pose,
    K: CameraIntrinsics,
    rounds: int = 2,
    chi2_threshold: float = CHI2_2DOF,
    delta: float = REPROJ_DELTA,
    opts: SolveOptions | None = None,
    min_inliers: int = MIN_LANDMARKS,
) -> tuple[Pose, np.ndarray]:
    """Covariance-weighted pose refinement with chi-square reclassification.

    Returns the pose and the inlier mask over the given correspondences.

    Raises:
        TrackingLost: with fewer than ``min_inliers`` inliers.
    """
    if len(X) < min_inliers:
        raise TrackingLost(f"only {len(X)} matches for refinement")
    opts = opts or SolveOptions(max_iterations=20, update_tolerance=1e-10, policy=Policy.GN)
    kernel = RobustKernel("huber", delta)
    full = ReprojectionPose(X, u, covs, K)
    inlier = np.ones(len(X), dtype=bool)
    pose = init
    for _ in range(rounds):
        if inlier.sum() < min_inliers:
            break
        sub = ReprojectionPose(X[inlier], u[inlier], covs[inlier], K)
        pose, _ = solve(sub, pose, kernel, opts)
        inlier = full.chi2(pose) < chi2_threshold
    if inlier.sum() < min_inliers:
        raise TrackingLost(f"only {int(inlier.sum())} inliers after refinement")
    return pose, inlier


@dataclass
class TrackingResult:
    pose: Pose
    matches: list[TrackedMatch]
    n_inliers: int
    direct_reports: list[SolveReport]


def track_frame(
    maps: RepeatabilityMaps,
    keypoints: KeypointSet,
    landmark_ids: np.ndarray,
    positions: np.ndarray,
    descriptors: np.ndarray,
    predicted: Pose,
    K: CameraIntrinsics,
    mode: ParamMode = ParamMode.MC,
    coarse_to_fine: bool = True,
    max_distance: float = MAX_DESCRIPTOR_DISTANCE,
) -> TrackingResult:
    """Direct alignment, association and refinement for one frame."""
    uv, front = project_points(K, predicted.apply(positions))
    vis = front & K.in_image(np.nan_to_num(uv, nan=-1e9), margin=-2.0 * CELL)
    pose, reports = track_direct(maps, positions[vis], predicted, K, coarse_to_fine)
    matches = associate(pose, landmark_ids, positions, descriptors, keypoints, K, max_distance)
    if len(matches) < MIN_LANDMARKS:
        raise TrackingLost(f"only {len(matches)} associations")
    lm_index = {int(l): i for i, l in enumerate(landmark_ids)}
    rows = np.array([lm_index[m.landmark] for m in matches])
    kp = np.array([m.keypoint for m in matches])
    meas, covs = keypoints.measurements(mode)
    pose, inlier = refine_pose(positions[rows], meas[kp], covs[kp], pose, K)
    for m, ok in zip(matches, inlier):
        m.inlier = bool(ok)
    return TrackingResult(pose, matches, int(inlier.sum()), reports)
