"""Deterministic synthetic worlds with exact ground truth.

A world is a cloud of landmarks and a camera trajectory. Rendering a frame
produces the same kind of prediction volume a detector network would emit:
Gaussian keypoint blobs encoded as 65-channel logits, per-cell descriptors
derived from per-landmark identity vectors, and a global embedding computed
from the visible landmark set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline

from .features import CELL, PredictionVolume, pixels_to_channels
from .geometry import CameraIntrinsics, Pose, project_points

TRAJECTORIES = ("orbit", "line", "loop", "random-walk")
KEYPOINT_MASS = 0.9
CELL_MASS_CAP = 0.98
BACKGROUND_PROB = 1e-9
NEAR_PLANE = 0.1


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(500.0, 500.0, 319.5, 239.5, 640, 480)


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    n_landmarks: int = 1000
    extent: float = 10.0  # side of the landmark box, also used as scene diameter
    trajectory: str = "orbit"
    n_frames: int = 60
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    keypoint_jitter: float = 0.0  # px, isotropic
    descriptor_noise: float = 0.0  # expected norm of the additive noise vector
    blob_sigma: float = 1.0  # px
    outlier_fraction: float = 0.0
    # anisotropic model: blob covariance with this major/minor sigma ratio and a
    # random orientation; keypoint jitter is then drawn from the blob covariance
    anisotropy: float = 1.0
    anisotropic_jitter: float = 0.0  # multiplier on the blob covariance for jitter
    descriptor_dim: int = 256
    embedding_dim: int = 4096
    fps: float = 30.0
    arc_deg: float = 60.0  # orbit sweep
    radius: float | None = None  # orbit/loop radius, defaults depend on trajectory
    height: float = 0.2  # camera height as a fraction of extent (orbit, line)
    loop_clearance: float = 0.3  # landmark-free radius around the loop path (fraction of extent)
    render_descriptors: bool = True

    def __post_init__(self):
        if self.n_landmarks < 1:
            raise ValueError("world needs at least one landmark")
        if self.n_frames < 1:
            raise ValueError("world needs at least one frame")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if not self.extent > 0:
            raise ValueError("extent must be positive")
        for name in ("keypoint_jitter", "descriptor_noise", "blob_sigma", "anisotropic_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError("outlier_fraction must be in [0, 1)")
        if self.anisotropy < 1.0:
            raise ValueError("anisotropy is a major/minor ratio >= 1")

    def with_(self, **kw) -> "WorldSpec":
        return replace(self, **kw)


@dataclass
class FrameTable:
    """Per-frame ground-truth observations."""

    ids: np.ndarray  # visible landmark ids
    true_px: np.ndarray  # exact projections
    obs_px: np.ndarray  # jittered/outlier-displaced blob centers
    depth: np.ndarray
    claimed: np.ndarray  # bool: landmark owns a keypoint cell
    blob_cov: np.ndarray  # (n, 2, 2)
    outlier: np.ndarray  # bool


@dataclass
class GroundTruth:
    spec: WorldSpec
    poses: list[Pose]
    timestamps: np.ndarray
    landmarks: np.ndarray  # (N, 3)
    descriptors: np.ndarray  # (N, D) identity descriptors
    tables: list[FrameTable]
    projection: np.ndarray | None  # (G, D) embedding projection

    @property
    def K(self) -> CameraIntrinsics:
        return self.spec.intrinsics

    def centers(self) -> np.ndarray:
        return np.array([p.center() for p in self.poses])

    def visible(self, k: int) -> set[int]:
        t = self.tables[k]
        return set(t.ids[t.claimed].tolist())

    def overlap(self, a: int, b: int) -> float:
        """Fraction of frame ``a``'s claimed landmarks also claimed in frame ``b``."""
        va = self.visible(a)
        return len(va & self.visible(b)) / max(len(va), 1)


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    f = np.asarray(target, float) - center
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.vstack([r, d, f])
    return Pose(R, -R @ center)


def _identity_descriptors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Random unit vectors, orthonormal within consecutive blocks of ``dim``."""
    out = np.empty((n, dim))
    for start in range(0, n, dim):
        m = min(dim, n - start)
        q, _ = np.linalg.qr(rng.standard_normal((dim, m)))
        out[start : start + m] = q.T
    return out


def _trajectory(spec: WorldSpec, rng: np.random.Generator) -> list[Pose]:
    e = spec.extent
    n = spec.n_frames
    s = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    h = spec.height * e
    if spec.trajectory == "orbit":
        r = spec.radius or 2.0 * e
        ang = np.deg2rad(spec.arc_deg) * s
        return [look_at(np.array([r * np.cos(a), r * np.sin(a), h]), np.zeros(3)) for a in ang]
    if spec.trajectory == "line":
        r = spec.radius or 2.0 * e
        xs = (s - 0.5) * 0.5 * e
        return [look_at(np.array([x, -r, h]), np.array([x, 0.0, 0.0])) for x in xs]
    if spec.trajectory == "loop":
        r = spec.radius or 0.15 * e
        ang = 2.0 * np.pi * s
        poses = []
        for a in ang:
            c = np.array([r * np.cos(a), r * np.sin(a), 0.0])
            out = np.array([np.cos(a), np.sin(a), 0.0])
            tangent = np.array([-np.sin(a), np.cos(a), 0.0])
            poses.append(look_at(c, c + out + 0.3 * tangent))
        return poses
    # random walk: spline through random waypoints, always facing the scene center
    n_way = max(4, n // 15)
    r = spec.radius or 2.0 * e
    way_ang = np.cumsum(rng.normal(0.0, 0.25, n_way))
    way_r = r * (1.0 + 0.1 * rng.normal(size=n_way))
    way_h = h + 0.1 * e * rng.normal(size=n_way)
    way = np.column_stack([way_r * np.cos(way_ang), way_r * np.sin(way_ang), way_h])
    spline = CubicSpline(np.linspace(0, 1, n_way), way, axis=0)
    return [look_at(spline(si), np.zeros(3)) for si in s]


def _landmarks(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    e = spec.extent
    if spec.trajectory != "loop":
        return rng.uniform(-0.5 * e, 0.5 * e, size=(spec.n_landmarks, 3))
    r_min = (spec.radius or 0.15 * e) + spec.loop_clearance * e
    pts = np.zeros((0, 3))
    while len(pts) < spec.n_landmarks:
        cand = rng.uniform(-0.5 * e, 0.5 * e, size=(2 * spec.n_landmarks, 3))
        cand[:, 2] *= 0.5
        cand = cand[np.hypot(cand[:, 0], cand[:, 1]) > r_min]
        pts = np.vstack([pts, cand])
    return pts[: spec.n_landmarks]


def _frame_rng(seed: int, k: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, k, stream])


def _frame_table(spec: WorldSpec, pose: Pose, landmarks: np.ndarray, k: int) -> FrameTable:
    K = spec.intrinsics
    Xc = pose.apply(landmarks)
    uv, front = project_points(K, Xc)
    front &= Xc[:, 2] > NEAR_PLANE
    inside = front & K.in_image(np.nan_to_num(uv, nan=-1e9))
    ids = np.flatnonzero(inside)
    true_px = uv[ids]
    depth = Xc[ids, 2]
    n = len(ids)
    rng = _frame_rng(spec.seed, k, 1)

    sig = spec.blob_sigma
    if spec.anisotropy > 1.0:
        theta = rng.uniform(0.0, np.pi, n)
        major = sig * np.sqrt(spec.anisotropy)
        minor = sig / np.sqrt(spec.anisotropy)
        c, s = np.cos(theta), np.sin(theta)
        Rm = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        D = np.array([[major**2, 0.0], [0.0, minor**2]])
        blob_cov = Rm @ D @ Rm.transpose(0, 2, 1)
    else:
        blob_cov = np.broadcast_to(sig * sig * np.eye(2), (n, 2, 2)).copy()

    noise = rng.standard_normal((n, 2)) * spec.keypoint_jitter
    if spec.anisotropic_jitter > 0:
        L = np.linalg.cholesky(blob_cov * spec.anisotropic_jitter**2 + 1e-12 * np.eye(2))
        noise += np.einsum("nij,nj->ni", L, rng.standard_normal((n, 2)))
    obs_px = true_px + noise
    outlier = rng.random(n) < spec.outlier_fraction
    if outlier.any():
        obs_px[outlier] = rng.uniform([0, 0], [K.width - 1, K.height - 1], size=(int(outlier.sum()), 2))
    ok = K.in_image(obs_px)

    # one keypoint identity per cell: the nearest landmark wins
    cells = np.floor(obs_px / CELL).astype(int)
    cell_id = cells[:, 1] * (K.width // CELL) + cells[:, 0]
    claimed = np.zeros(n, dtype=bool)
    order = np.lexsort((ids, depth))
    seen: set[int] = set()
    for i in order:
        if not ok[i] or cell_id[i] in seen:
            continue
        seen.add(int(cell_id[i]))
        claimed[i] = True
    return FrameTable(ids, true_px, obs_px, depth, claimed, blob_cov, outlier)


def generate_world(spec: WorldSpec) -> GroundTruth:
    rng = np.random.default_rng(spec.seed)
    landmarks = _landmarks(spec, rng)
    poses = _trajectory(spec, rng)
    desc = _identity_descriptors(rng, spec.n_landmarks, spec.descriptor_dim)
    proj = None
    if spec.embedding_dim > 0:
        proj = rng.standard_normal((spec.embedding_dim, spec.descriptor_dim)) / np.sqrt(spec.embedding_dim)
    tables = [_frame_table(spec, p, landmarks, k) for k, p in enumerate(poses)]
    stamps = np.arange(spec.n_frames) / spec.fps
    return GroundTruth(spec, poses, stamps, landmarks, desc, tables, proj)


def with_landmarks(gt: GroundTruth, landmarks: np.ndarray) -> GroundTruth:
    """Same world and trajectory with the landmark cloud replaced (row ``i`` keeps identity ``i``)."""
    landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    if len(landmarks) != len(gt.landmarks):
        raise ValueError("landmark count must not change")
    tables = [_frame_table(gt.spec, p, landmarks, k) for k, p in enumerate(gt.poses)]
    return GroundTruth(gt.spec, gt.poses, gt.timestamps, landmarks, gt.descriptors, tables, gt.projection)


def snap_to_cell_centers(gt: GroundTruth, k: int) -> GroundTruth:
    """Move landmarks visible in frame ``k`` so they project onto cell centers, keeping depth.

    On such a world both repeatability maps are minimized exactly at the
    frame's true pose, which removes the sub-cell bias of direct alignment.
    """
    t = gt.tables[k]
    snapped = np.floor(t.true_px / CELL) * CELL + 0.5 * (CELL - 1)
    Xc = gt.K.backproject(snapped) * t.depth[:, None]
    L = gt.landmarks.copy()
    L[t.ids] = gt.poses[k].inverse().apply(Xc)
    return with_landmarks(gt, L)


def _blob_probabilities(spec: WorldSpec, table: FrameTable) -> np.ndarray:
    K = spec.intrinsics
    h, w = K.height, K.width
    prob = np.zeros((h, w))
    sel = np.flatnonzero(table.claimed)
    if len(sel) == 0:
        return prob
    centers = table.obs_px[sel]
    covs = table.blob_cov[sel]
    max_sig = float(np.sqrt(np.max(np.linalg.eigvalsh(covs))))
    rad = int(np.ceil(4.0 * max_sig)) + 1
    off = np.arange(-rad, rad + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    base = np.rint(centers).astype(int)
    px = base[:, 0, None, None] + ox[None]
    py = base[:, 1, None, None] + oy[None]
    dx = px - centers[:, 0, None, None]
    dy = py - centers[:, 1, None, None]
    inv = np.linalg.inv(covs)
    q = inv[:, 0, 0, None, None] * dx * dx + 2 * inv[:, 0, 1, None, None] * dx * dy + inv[:, 1, 1, None, None] * dy * dy
    g = np.exp(-0.5 * q)
    g *= KEYPOINT_MASS / g.sum(axis=(1, 2), keepdims=True)
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    np.add.at(prob, (py[inside], px[inside]), g[inside])
    return prob


def render_logits(spec: WorldSpec, table: FrameTable) -> np.ndarray:
    prob = _blob_probabilities(spec, table)
    cells = pixels_to_channels(prob, CELL)
    total = cells.sum(axis=2, keepdims=True)
    scale = np.where(total > CELL_MASS_CAP, CELL_MASS_CAP / np.maximum(total, 1e-300), 1.0)
    cells = cells * scale + BACKGROUND_PROB
    none = 1.0 - cells.sum(axis=2, keepdims=True)
    full = np.concatenate([cells, none], axis=2)
    return np.log(full)


def _render_descriptors(gt: GroundTruth, k: int, table: FrameTable) -> np.ndarray:
    spec = gt.spec
    K = spec.intrinsics
    hc, wc = K.height // CELL, K.width // CELL
    dim = spec.descriptor_dim
    rng = _frame_rng(spec.seed, k, 2)
    out = rng.standard_normal((hc, wc, dim), dtype=np.float32).astype(np.float64)
    out /= np.linalg.norm(out, axis=2, keepdims=True)
    sel = np.flatnonzero(table.claimed)
    if len(sel) == 0:
        return out
    d = gt.descriptors[table.ids[sel]].copy()
    if spec.descriptor_noise > 0:
        d += rng.standard_normal(d.shape) * (spec.descriptor_noise / np.sqrt(dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
    uv = table.obs_px[sel]
    cell_xy = np.floor(uv / CELL).astype(int)
    cand_cell, cand_dist, cand_owner = [], [], []
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            cx = cell_xy[:, 0] + dx
            cy = cell_xy[:, 1] + dy
            ok = (cx >= 0) & (cx < wc) & (cy >= 0) & (cy < hc)
            ctr = np.column_stack([cx, cy]) * CELL + 0.5 * (CELL - 1)
            cand_cell.append((cy * wc + cx)[ok])
            cand_dist.append(np.linalg.norm(ctr - uv, axis=1)[ok])
            cand_owner.append(np.flatnonzero(ok))
    cell_flat = np.concatenate(cand_cell)
    dist = np.concatenate(cand_dist)
    who = np.concatenate(cand_owner)
    # each cell takes the descriptor of the landmark nearest to its center
    order = np.lexsort((who, dist))
    cells_u, first = np.unique(cell_flat[order], return_index=True)
    owner = np.full(hc * wc, -1)
    owner[cells_u] = who[order][first]
    owner = owner.reshape(hc, wc)
    mask = owner >= 0
    out[mask] = d[owner[mask]]
    return out


def frame_embedding(gt: GroundTruth, ids: np.ndarray) -> np.ndarray:
    s = gt.descriptors[ids].sum(axis=0)
    e = gt.projection @ s
    n = np.linalg.norm(e)
    return e / n if n > 0 else e


def render_prediction(gt: GroundTruth, k: int) -> PredictionVolume:
    spec = gt.spec
    table = gt.tables[k]
    logits = render_logits(spec, table)
    if spec.render_descriptors:
        desc = _render_descriptors(gt, k, table)
    else:
        K = spec.intrinsics
        desc = np.zeros((K.height // CELL, K.width // CELL, 1))
    emb = None
    if gt.projection is not None:
        emb = frame_embedding(gt, table.ids)
    return PredictionVolume(logits, desc, emb)


def label_keypoints(gt: GroundTruth, k: int, locations: np.ndarray, tol: float = 2.0) -> np.ndarray:
    """Landmark id of each extracted keypoint, or -1 when none is within ``tol`` px."""
    table = gt.tables[k]
    sel = np.flatnonzero(table.claimed)
    labels = np.full(len(locations), -1, dtype=np.int64)
    if len(sel) == 0 or len(locations) == 0:
        return labels
    d = np.linalg.norm(locations[:, None, :] - table.obs_px[sel][None, :, :], axis=2)
    j = d.argmin(axis=1)
    hit = d[np.arange(len(locations)), j] <= tol
    labels[hit] = table.ids[sel[j[hit]]]
    return labels


def ground_truth_matches(
    gt: GroundTruth,
    i: int,
    j: int,
    keypoints_i: np.ndarray | None = None,
    keypoints_j: np.ndarray | None = None,
) -> list[tuple[int, int]]:
    """Index pairs observing the same landmark in frames ``i`` and ``j``.

    Without keypoint locations, indices refer to each frame's claimed-landmark
    list sorted by landmark id; with locations, to the given keypoint arrays.
    """
    if keypoints_i is None:
        lab_i = np.sort(gt.tables[i].ids[gt.tables[i].claimed])
    else:
        lab_i = label_keypoints(gt, i, keypoints_i)
    if keypoints_j is None:
        lab_j = np.sort(gt.tables[j].ids[gt.tables[j].claimed])
    else:
        lab_j = label_keypoints(gt, j, keypoints_j)
    index_j = {int(l): b for b, l in enumerate(lab_j) if l >= 0}
    return [(a, index_j[int(l)]) for a, l in enumerate(lab_i) if l >= 0 and int(l) in index_j]
