"""Map bootstrap, keyframe policy, landmark creation, local BA and map upkeep."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ba import CHI2_2DOF, bundle_adjust
from .features import ParamMode
from .geometry import (
    CameraIntrinsics,
    DegenerateGeometryError,
    Pose,
    epipolar_lines,
    project_points,
    relative_pose,
    triangulate_rays,
)
from .solver import SolveReport
from .worldmap import Frame, Keyframe, WorldMap, top_neighbors


class BootstrapError(RuntimeError):
    pass


@dataclass
class MappingParams:
    n_candidates: int = 10
    ann_max_distance: float = 0.8
    ann_ratio: float = 0.9
    epipolar_tau: float = 2.0
    epipolar_max_distance: float = 0.8
    min_parallax_deg: float = 1.0
    chi2: float = CHI2_2DOF
    kf_ratio: float = 0.7
    kf_max_gap: int = 20
    cull_fraction: float = 0.9
    cull_observers: int = 3
    fuse_px: float = 2.0
    fuse_max_distance: float = 0.8
    matcher: str = "both"  # epipolar | ann | both


@dataclass
class MappingStats:
    created: int = 0
    rejected_depth: int = 0
    rejected_parallax: int = 0
    rejected_chi2: int = 0
    removed_observations: int = 0
    culled_landmarks: int = 0
    culled_keyframes: int = 0
    fused: int = 0

    def add(self, other: "MappingStats"):
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))


# --- two-view bootstrap ------------------------------------------------------


def descriptor_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise L2 distances between unit descriptors."""
    return np.sqrt(np.maximum(2.0 - 2.0 * (a @ b.T), 0.0))


def mutual_nearest(a: np.ndarray, b: np.ndarray, max_distance: float = np.inf, ratio: float = 1.0):
    """Mutual nearest-neighbor pairs ``(i, j)`` between descriptor sets."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = descriptor_distances(a, b)
    ab = d.argmin(axis=1)
    ba = d.argmin(axis=0)
    i = np.arange(len(a))
    ok = (ba[ab] == i) & (d[i, ab] < max_distance)
    if ratio < 1.0 and d.shape[1] > 1:
        second = np.partition(d, 1, axis=1)[:, 1]
        ok &= d[i, ab] < ratio * second
    return np.column_stack([i[ok], ab[ok]])


def _hartley(x: np.ndarray):
    c = x.mean(axis=0)
    s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(x - c, axis=1)), 1e-12)
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return np.column_stack([x, np.ones(len(x))]) @ T.T, T


def eight_point(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """Essential matrix from >= 8 normalized correspondences, ``xb^T E xa = 0``."""
    ha, Ta = _hartley(xa)
    hb, Tb = _hartley(xb)
    A = np.einsum("ni,nj->nij", hb, ha).reshape(len(xa), 9)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    E = Tb.T @ E @ Ta
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def symmetric_epipolar_error(E: np.ndarray, K: CameraIntrinsics, ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    """RMS of the two point-to-epipolar-line distances, in pixels."""
    F = K.K_inv.T @ E @ K.K_inv
    ha = np.column_stack([ua, np.ones(len(ua))])
    hb = np.column_stack([ub, np.ones(len(ub))])
    lb = ha @ F.T  # lines in b
    la = hb @ F  # lines in a
    num = np.sum(hb * lb, axis=1)
    db = num / np.maximum(np.hypot(lb[:, 0], lb[:, 1]), 1e-300)
    da = num / np.maximum(np.hypot(la[:, 0], la[:, 1]), 1e-300)
    return np.sqrt(0.5 * (da**2 + db**2))


def ransac_essential(
    K: CameraIntrinsics,
    ua: np.ndarray,
    ub: np.ndarray,
    rng: np.random.Generator,
    threshold: float = 1.0,
    confidence: float = 0.999,
    max_iterations: int = 2000,
):
    n = len(ua)
    xa = K.backproject(ua)[:, :2]
    xb = K.backproject(ub)[:, :2]
    best = np.zeros(n, dtype=bool)
    it, needed = 0, max_iterations
    while it < min(needed, max_iterations):
        it += 1
        sample = rng.choice(n, 8, replace=False)
        try:
            E = eight_point(xa[sample], xb[sample])
        except np.linalg.LinAlgError:
            continue
        inl = symmetric_epipolar_error(E, K, ua, ub) < threshold
        if inl.sum() > best.sum():
            # local optimization: refit on the consensus set while it grows
            for _ in range(5):
                if inl.sum() < 8:
                    break
                E2 = eight_point(xa[inl], xb[inl])
                inl2 = symmetric_epipolar_error(E2, K, ua, ub) < threshold
                if inl2.sum() <= inl.sum():
                    break
                inl = inl2
            best = inl
            w = inl.mean()
            p = max(1.0 - w**8, 1e-12)
            needed = int(np.ceil(np.log(1.0 - confidence) / np.log(p))) if p < 1.0 else max_iterations
    if best.sum() < 8:
        raise BootstrapError("essential-matrix consensus failed")
    E = eight_point(xa[best], xb[best])
    for _ in range(3):
        inl = symmetric_epipolar_error(E, K, ua, ub) < threshold
        if inl.sum() <= best.sum():
            break
        best = inl
        E = eight_point(xa[best], xb[best])
    return E, best


def triangulate_pairs(pose_a: Pose, pose_b: Pose, K: CameraIntrinsics, ua: np.ndarray, ub: np.ndarray):
    """Batched mid-point triangulation. Returns ``(points, parallax, depth_a, depth_b, ok)``."""
    c_a, c_b = pose_a.center(), pose_b.center()
    if np.linalg.norm(c_a - c_b) < 1e-12:
        raise DegenerateGeometryError("identical camera centers")
    d_a = K.backproject(ua) @ pose_a.R
    d_b = K.backproject(ub) @ pose_b.R
    d_a /= np.linalg.norm(d_a, axis=1, keepdims=True)
    d_b /= np.linalg.norm(d_b, axis=1, keepdims=True)
    n = len(ua)
    X, par, ok = triangulate_rays(np.tile(c_a, (n, 1)), d_a, np.tile(c_b, (n, 1)), d_b)
    za = pose_a.apply(X)[:, 2]
    zb = pose_b.apply(X)[:, 2]
    return X, par, za, zb, ok


def decompose_essential(E: np.ndarray, K: CameraIntrinsics, ua: np.ndarray, ub: np.ndarray) -> tuple[Pose, np.ndarray]:
    """Cheirality-maximizing ``(R, t)`` with ``x_b = R x_a + t`` and unit ``|t|``."""
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    best, best_count, best_mask = None, -1, None
    for R in (U @ W @ Vt, U @ W.T @ Vt):
        for t in (U[:, 2], -U[:, 2]):
            rel = Pose(R, t)
            _, _, za, zb, ok = triangulate_pairs(Pose.identity(), rel, K, ua, ub)
            mask = ok & (za > 0) & (zb > 0)
            if mask.sum() > best_count:
                best, best_count, best_mask = rel, int(mask.sum()), mask
    return best, best_mask


@dataclass
class TwoViewResult:
    pose_b: Pose  # pose of view b with view a at the identity
    points: np.ndarray
    inliers: np.ndarray  # over input correspondences
    median_parallax_deg: float
    valid: np.ndarray = field(default=None)  # inliers that triangulated cleanly


def two_view_geometry(
    K: CameraIntrinsics,
    ua: np.ndarray,
    ub: np.ndarray,
    rng: np.random.Generator | None = None,
    min_parallax_deg: float = 1.0,
    min_matches: int = 50,
) -> TwoViewResult:
    """Relative pose and structure from pixel correspondences.

    Scale is fixed so the median depth in view ``a`` is 1.

    Raises:
        BootstrapError: too few correspondences, or geometry too close to a
            pure rotation to triangulate.
    """
    if len(ua) < min_matches:
        raise BootstrapError(f"{len(ua)} matches, need {min_matches}")
    rng = rng or np.random.default_rng(0)
    E, inl = ransac_essential(K, ua, ub, rng)
    rel, cheiral = decompose_essential(E, K, ua[inl], ub[inl])
    X, par, za, zb, ok = triangulate_pairs(Pose.identity(), rel, K, ua[inl], ub[inl])
    good = ok & (za > 0) & (zb > 0)
    if good.sum() < min(min_matches, 8):
        raise BootstrapError("cheirality check failed")
    med_par = float(np.rad2deg(np.median(par[good])))
    if med_par < min_parallax_deg:
        raise BootstrapError(f"median parallax {med_par:.3f} deg: degenerate geometry")
    good &= par >= np.deg2rad(min_parallax_deg)
    scale = 1.0 / np.median(za[good])
    rel = Pose(rel.R, rel.t * scale)
    idx = np.flatnonzero(inl)
    valid = np.zeros(len(ua), dtype=bool)
    valid[idx[good]] = True
    points = np.full((len(ua), 3), np.nan)
    points[idx] = X * scale
    return TwoViewResult(rel, points, inl, med_par, valid)


def bootstrap_two_view(
    frame_a: Frame,
    frame_b: Frame,
    K: CameraIntrinsics,
    mode: ParamMode = ParamMode.MC,
    rng: np.random.Generator | None = None,
    params: MappingParams | None = None,
    refine: bool = True,
    min_median_parallax_deg: float = 0.0,
) -> WorldMap:
    """Initialize a map from two frames; the world frame is ``frame_a``'s camera."""
    params = params or MappingParams()
    pairs = mutual_nearest(frame_a.keypoints.descriptors, frame_b.keypoints.descriptors)
    if len(pairs) < 50:
        raise BootstrapError(f"only {len(pairs)} mutual matches")
    ka, kb = frame_a.keypoints, frame_b.keypoints
    ma, _ = ka.measurements(mode)
    mb, _ = kb.measurements(mode)
    tv = two_view_geometry(K, ma[pairs[:, 0]], mb[pairs[:, 1]], rng, params.min_parallax_deg)
    if tv.median_parallax_deg < min_median_parallax_deg:
        raise BootstrapError(f"median parallax {tv.median_parallax_deg:.2f} deg below {min_median_parallax_deg}")
    wm = WorldMap(K)
    kfa = wm.add_keyframe(Keyframe.from_frame(0, frame_a, Pose.identity(), mode))
    kfb = wm.add_keyframe(Keyframe.from_frame(1, frame_b, tv.pose_b, mode))
    for p, X in zip(pairs[tv.valid], tv.points[tv.valid]):
        wm.add_landmark(X, kb.descriptors[p[1]], {0: int(p[0]), 1: int(p[1])})
    stats = MappingStats()
    _chi2_prune(wm, [0, 1], params.chi2, stats)
    if refine and len(wm.landmarks) >= 8:
        global_ba(wm, fixed={0}, params=params)
        rescale_map(wm, 0)
    if len(wm.landmarks) < 8:
        raise BootstrapError("too few landmarks survived bootstrap")
    frame_a.pose, frame_b.pose = kfa.pose, kfb.pose
    return wm


def rescale_map(wm: WorldMap, ref: int) -> float:
    """Scale the map so median landmark depth in keyframe ``ref`` is 1."""
    kf = wm.keyframes[ref]
    ids = kf.tracked_landmarks()
    if len(ids) == 0:
        return 1.0
    X = np.array([wm.landmarks[int(i)].position for i in ids])
    s = 1.0 / float(np.median(kf.pose.apply(X)[:, 2]))
    c = kf.pose.center()
    for lm in wm.landmarks.values():
        lm.position = c + s * (lm.position - c)
    for k in wm.keyframes.values():
        kc = c + s * (k.pose.center() - c)
        k.pose = Pose(k.pose.R, -k.pose.R @ kc)
    return s


# --- keyframe policy and candidates -------------------------------------------


def should_insert_keyframe(
    n_inliers: int, ref_landmarks: int, frames_since: int, ratio: float = 0.7, max_gap: int = 20
) -> bool:
    if frames_since >= max_gap:
        return True
    if ref_landmarks <= 0:
        return True
    return n_inliers / ref_landmarks < ratio


def select_candidates(wm: WorldMap, kf_id: int, n: int = 10) -> list[int]:
    cov = {k: w for k, w in wm.keyframes[kf_id].covisibility.items() if k in wm.keyframes}
    return top_neighbors(cov, n)


# --- matching -----------------------------------------------------------------


def match_untracked_ann(kf: Keyframe, cand: Keyframe, max_distance: float = 0.8, ratio: float = 0.9):
    """Nearest-descriptor pairs between the keyframes' untracked features.

    Exhaustive search; each candidate feature is used at most once, keeping
    the closest pair.
    """
    ia = kf.untracked()
    ib = cand.untracked()
    if len(ia) == 0 or len(ib) == 0:
        return []
    d = descriptor_distances(kf.keypoints.descriptors[ia], cand.keypoints.descriptors[ib])
    nn = d.argmin(axis=1)
    best = d[np.arange(len(ia)), nn]
    if d.shape[1] > 1:
        second = np.partition(d, 1, axis=1)[:, 1]
    else:
        second = np.full(len(ia), np.inf)
    ok = (best < max_distance) & (best < ratio * second)
    return _unique_pairs(ia[ok], ib[nn[ok]], best[ok])


def _unique_pairs(a: np.ndarray, b: np.ndarray, score: np.ndarray, tie: np.ndarray | None = None):
    tie = np.zeros(len(a)) if tie is None else tie
    order = np.lexsort((a, tie, score))
    used_a, used_b, out = set(), set(), []
    for o in order:
        i, j = int(a[o]), int(b[o])
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        out.append((i, j))
    out.sort()
    return out


def match_epipolar(
    kf: Keyframe,
    cand: Keyframe,
    K: CameraIntrinsics,
    tau: float = 2.0,
    max_distance: float = 0.8,
):
    """Epipolar-constrained matching of untracked features.

    A candidate in ``cand`` must lie within ``tau`` px of the epipolar line of
    the ``kf`` feature (any feature that close lies in a grid cell the line
    crosses, so the whole line is searched). The best descriptor distance wins;
    near-ties are resolved by the covariance-weighted epipolar distance.
    """
    ia = kf.untracked()
    ib = cand.untracked()
    if len(ia) == 0 or len(ib) == 0:
        return []
    rel = relative_pose(kf.pose, cand.pose)
    try:
        lines = epipolar_lines(K, rel, kf.meas[ia])
    except DegenerateGeometryError:
        return []
    ub = cand.meas[ib]
    norm = np.hypot(lines[:, 0], lines[:, 1])
    raw = (lines[:, :2] @ ub.T + lines[:, 2:3]) / norm[:, None]
    det = np.linalg.det(kf.covs[ia])
    weighted = np.abs(raw) / det[:, None]
    d = descriptor_distances(kf.keypoints.descriptors[ia], cand.keypoints.descriptors[ib])
    d = np.where(np.abs(raw) < tau, d, np.inf)
    nn = d.argmin(axis=1)
    rows = np.arange(len(ia))
    best = d[rows, nn]
    ok = best < max_distance
    return _unique_pairs(ia[ok], ib[nn[ok]], best[ok], weighted[rows, nn][ok])


# --- landmark creation ----------------------------------------------------------


def _chi2(pose: Pose, K, X, u, covs):
    uv, front = project_points(K, pose.apply(X))
    e = np.where(front[:, None], uv - u, 1e6)
    return np.einsum("ni,nij,nj->n", e, np.linalg.inv(covs), e), front


def create_landmarks(
    wm: WorldMap,
    kf_id: int,
    cand_id: int,
    pairs,
    K: CameraIntrinsics,
    params: MappingParams | None = None,
    stats: MappingStats | None = None,
) -> list[int]:
    """Triangulate pairs ``(kp in kf, kp in cand)`` and insert the ones passing every check."""
    params = params or MappingParams()
    stats = stats if stats is not None else MappingStats()
    if not pairs:
        return []
    kf, cand = wm.keyframes[kf_id], wm.keyframes[cand_id]
    pairs = np.asarray(pairs, dtype=np.int64)
    ia, ib = pairs[:, 0], pairs[:, 1]
    try:
        X, par, za, zb, ok = triangulate_pairs(kf.pose, cand.pose, K, kf.meas[ia], cand.meas[ib])
    except DegenerateGeometryError:
        return []
    depth_ok = ok & (za > 0) & (zb > 0)
    par_ok = par >= np.deg2rad(params.min_parallax_deg)
    c1, _ = _chi2(kf.pose, K, X, kf.meas[ia], kf.covs[ia])
    c2, _ = _chi2(cand.pose, K, X, cand.meas[ib], cand.covs[ib])
    chi_ok = (c1 < params.chi2) & (c2 < params.chi2)
    stats.rejected_depth += int((~depth_ok).sum())
    stats.rejected_parallax += int((depth_ok & ~par_ok).sum())
    stats.rejected_chi2 += int((depth_ok & par_ok & ~chi_ok).sum())
    accept = depth_ok & par_ok & chi_ok
    created = []
    for n in np.flatnonzero(accept):
        if kf.landmark_of[ia[n]] >= 0 or cand.landmark_of[ib[n]] >= 0:
            continue
        lm = wm.add_landmark(X[n], kf.keypoints.descriptors[ia[n]], {kf_id: int(ia[n]), cand_id: int(ib[n])})
        created.append(lm.id)
    stats.created += len(created)
    return created


def map_new_keyframe(
    wm: WorldMap, kf_id: int, K: CameraIntrinsics, params: MappingParams | None = None, stats=None
) -> list[int]:
    """Create landmarks between a new keyframe and its best covisible keyframes."""
    params = params or MappingParams()
    stats = stats if stats is not None else MappingStats()
    kf = wm.keyframes[kf_id]
    created = []
    for c in select_candidates(wm, kf_id, params.n_candidates):
        cand = wm.keyframes[c]
        pairs = []
        if params.matcher in ("epipolar", "both"):
            pairs = match_epipolar(kf, cand, K, params.epipolar_tau, params.epipolar_max_distance)
            created += create_landmarks(wm, kf_id, c, pairs, K, params, stats)
        if params.matcher in ("ann", "both"):
            pairs = match_untracked_ann(kf, cand, params.ann_max_distance, params.ann_ratio)
            created += create_landmarks(wm, kf_id, c, pairs, K, params, stats)
    return created


# --- bundle adjustment -------------------------------------------------------------


@dataclass
class BAOutcome:
    report: SolveReport
    stats: MappingStats
    optimized: list[int]
    fixed: list[int]


def _run_ba(wm: WorldMap, free: list[int], fixed: list[int], lm_ids: list[int], params: MappingParams, stats):
    kf_ids = list(free) + list(fixed)
    pos_of = {k: i for i, k in enumerate(kf_ids)}
    pt_of = {l: i for i, l in enumerate(lm_ids)}
    kf_idx, pt_idx, u, covs, obs = [], [], [], [], []
    for l in lm_ids:
        lm = wm.landmarks[l]
        for k, kp in lm.observations.items():
            if k not in pos_of:
                continue
            kf = wm.keyframes[k]
            kf_idx.append(pos_of[k])
            pt_idx.append(pt_of[l])
            u.append(kf.meas[kp])
            covs.append(kf.covs[kp])
            obs.append((l, k))
    if not obs:
        return SolveReport(converged=True)
    poses = [wm.keyframes[k].pose for k in kf_ids]
    fixed_mask = np.array([k in set(fixed) for k in kf_ids])
    points = np.array([wm.landmarks[l].position for l in lm_ids])
    res = bundle_adjust(
        wm.K, poses, fixed_mask, points, np.array(kf_idx), np.array(pt_idx), np.array(u), np.array(covs),
        chi2_threshold=params.chi2,
    )
    for k, p in zip(kf_ids, res.poses):
        if k not in fixed:
            wm.keyframes[k].pose = p
    for l, X in zip(lm_ids, res.points):
        wm.landmarks[l].position = X
    for (l, k), ok in zip(obs, res.inliers):
        if not ok and l in wm.landmarks and k in wm.landmarks[l].observations:
            wm.remove_observation(l, k)
            stats.removed_observations += 1
    for l in lm_ids:
        if l in wm.landmarks and len(wm.landmarks[l].observations) < 2:
            wm.remove_landmark(l)
            stats.culled_landmarks += 1
    return res.reports[-1] if res.reports else SolveReport(converged=True)


def local_bundle_adjustment(wm: WorldMap, kf_id: int, params: MappingParams | None = None) -> BAOutcome:
    """BA over a keyframe, its covisible neighbors and everything they observe.

    Keyframes that observe those landmarks without being covisible with
    ``kf_id`` are held fixed; the map's first keyframe is always fixed.
    """
    params = params or MappingParams()
    stats = MappingStats()
    kf = wm.keyframes[kf_id]
    local = [kf_id] + sorted(k for k in kf.covisibility if k in wm.keyframes)
    root = min(wm.keyframes)
    lm_ids = sorted({int(l) for k in local for l in wm.keyframes[k].tracked_landmarks()})
    observers = {k for l in lm_ids for k in wm.landmarks[l].observations}
    fixed = sorted((observers - set(local)) | ({root} & set(local)))
    free = [k for k in local if k not in fixed]
    if not fixed and free:
        fixed = [min(free)]
        free = free[1:]
    report = _run_ba(wm, free, fixed, lm_ids, params, stats)
    return BAOutcome(report, stats, free, fixed)


def global_ba(wm: WorldMap, fixed: set[int] | None = None, params: MappingParams | None = None) -> BAOutcome:
    params = params or MappingParams()
    if len(wm.keyframes) < 2:
        raise ValueError("global bundle adjustment needs at least two keyframes")
    stats = MappingStats()
    fixed = sorted(fixed if fixed is not None else {min(wm.keyframes)})
    free = [k for k in sorted(wm.keyframes) if k not in fixed]
    report = _run_ba(wm, free, fixed, sorted(wm.landmarks), params, stats)
    return BAOutcome(report, stats, free, fixed)


def _chi2_prune(wm: WorldMap, kf_ids, chi2: float, stats: MappingStats):
    for k in kf_ids:
        kf = wm.keyframes[k]
        kps = np.flatnonzero(kf.landmark_of >= 0)
        if len(kps) == 0:
            continue
        X = np.array([wm.landmarks[int(kf.landmark_of[j])].position for j in kps])
        c, front = _chi2(kf.pose, wm.K, X, kf.meas[kps], kf.covs[kps])
        for j in kps[(c >= chi2) | ~front]:
            wm.remove_observation(int(kf.landmark_of[j]), k)
            stats.removed_observations += 1
    for l in [l for l, lm in wm.landmarks.items() if len(lm.observations) < 2]:
        wm.remove_landmark(l)
        stats.culled_landmarks += 1


# --- culling and fusion ----------------------------------------------------------------


def redundant_keyframes(wm: WorldMap, fraction: float = 0.9, observers: int = 3, protect=()) -> list[int]:
    out = []
    for k in sorted(wm.keyframes):
        if k in protect:
            continue
        ids = wm.keyframes[k].tracked_landmarks()
        if len(ids) == 0:
            continue
        covered = sum(1 for l in ids if len(wm.landmarks[int(l)].observations) - 1 >= observers)
        if covered >= fraction * len(ids):
            out.append(k)
    return out


def _reproject_near(wm: WorldMap, lm_id: int, kf: Keyframe, kp: int, px: float) -> bool:
    uv, front = project_points(wm.K, kf.pose.apply(wm.landmarks[lm_id].position[None]))
    return bool(front[0]) and float(np.linalg.norm(uv[0] - kf.meas[kp])) < px


def find_duplicates(wm: WorldMap, kf_ids=None, px: float = 2.0, max_distance: float = 0.8):
    """Landmark pairs that reproject onto each other's observations in both directions."""
    kf_ids = sorted(wm.keyframes) if kf_ids is None else [k for k in kf_ids if k in wm.keyframes]
    found = set()
    for k in kf_ids:
        kf = wm.keyframes[k]
        near = {int(l) for n in kf.covisibility for l in wm.keyframes[n].tracked_landmarks()}
        cand = np.array(sorted(l for l in near if k not in wm.landmarks[l].observations), dtype=np.int64)
        tracked = np.flatnonzero(kf.landmark_of >= 0)
        if len(cand) == 0 or len(tracked) == 0:
            continue
        X = np.array([wm.landmarks[l].position for l in cand])
        uv, front = project_points(wm.K, kf.pose.apply(X))
        d = np.linalg.norm(np.nan_to_num(uv, nan=1e9)[:, None, :] - kf.meas[tracked][None], axis=2)
        j = d.argmin(axis=1)
        hit = front & (d[np.arange(len(cand)), j] < px)
        for a, jj in zip(cand[hit], j[hit]):
            b = int(kf.landmark_of[tracked[jj]])
            la, lb = wm.landmarks[int(a)], wm.landmarks[b]
            if float(np.linalg.norm(la.descriptor - lb.descriptor)) >= max_distance:
                continue
            # b must reproject onto a's observations as well
            if all(_reproject_near(wm, b, wm.keyframes[o], kp, px) for o, kp in la.observations.items()):
                found.add((min(int(a), b), max(int(a), b)))
    return sorted(found)


def cull_and_fuse(wm: WorldMap, kf_ids=None, params: MappingParams | None = None, protect=()) -> MappingStats:
    """Fuse duplicate landmarks, then cull redundant keyframes.

    The oldest keyframe and anything in ``protect`` are never culled.
    """
    params = params or MappingParams()
    stats = MappingStats()
    for a, b in find_duplicates(wm, kf_ids, params.fuse_px, params.fuse_max_distance):
        if a not in wm.landmarks or b not in wm.landmarks:
            continue
        na, nb = len(wm.landmarks[a].observations), len(wm.landmarks[b].observations)
        keep, drop = (a, b) if na >= nb else (b, a)
        wm.merge_landmarks(keep, drop)
        stats.fused += 1
    protect = set(protect) | {min(wm.keyframes)}
    while True:
        red = redundant_keyframes(wm, params.cull_fraction, params.cull_observers, protect)
        if not red:
            break
        wm.remove_keyframe(red[0])
        stats.culled_keyframes += 1
    return stats
