"""Place recognition by global embedding, loop verification and Sim(3) correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .evaluation import EvaluationError, umeyama
from .geometry import (
    CameraIntrinsics,
    Pose,
    Sim3Pose,
    exp_sim3,
    log_sim3,
    project_points,
    sim3_adjoint,
    sim3_left_jacobian,
)
from .mapping import MappingParams, find_duplicates, global_ba, mutual_nearest
from .solver import Policy, RobustKernel, SolveOptions, SolveReport, solve
from .worldmap import WorldMap


@dataclass
class LoopParams:
    alpha: float = 0.9
    min_id_gap: int = 30
    top_k: int = 3
    ratio: float = 0.9
    reprojection_px: float = 4.0
    min_inliers: int = 20
    ransac_iterations: int = 300
    essential_weight: int = 100
    global_ba: bool = True


class EmbeddingDatabase:
    """Keyframe id -> unit global embedding."""

    def __init__(self):
        self.entries: dict[int, np.ndarray] = {}

    def add(self, kf_id: int, embedding: np.ndarray):
        e = np.asarray(embedding, dtype=float)
        n = np.linalg.norm(e)
        if not n > 0:
            raise ValueError("embedding must be non-zero")
        self.entries[kf_id] = e / n

    def remove(self, kf_id: int):
        self.entries.pop(kf_id, None)

    def __contains__(self, kf_id):
        return kf_id in self.entries

    def __len__(self):
        return len(self.entries)

    def distances(self, query: np.ndarray, ids) -> np.ndarray:
        if len(ids) == 0:
            return np.zeros(0)
        M = np.array([self.entries[i] for i in ids])
        return np.linalg.norm(M - query[None], axis=1)


def eligible_keyframes(db: EmbeddingDatabase, kf_id: int, wm: WorldMap, params: LoopParams | None = None) -> list[int]:
    """Keyframes old enough and with no covisibility link to ``kf_id``."""
    params = params or LoopParams()
    cov = wm.keyframes[kf_id].covisibility
    return [
        k
        for k in sorted(db.entries)
        if k != kf_id and k in wm.keyframes and k not in cov and kf_id - k >= params.min_id_gap
    ]


def detect_candidates(db: EmbeddingDatabase, kf_id: int, wm: WorldMap, params: LoopParams | None = None) -> list[int]:
    """Loop candidates for a keyframe, nearest embedding first.

    Only keyframes sharing no covisibility with ``kf_id`` and at least
    ``min_id_gap`` ids older are eligible; a candidate must be closer than
    ``alpha`` times the farthest covisible neighbor.
    """
    params = params or LoopParams()
    kf = wm.keyframes[kf_id]
    if kf_id not in db:
        return []
    q = db.entries[kf_id]
    neigh = [k for k in kf.covisibility if k in db]
    if not neigh:
        return []
    d_cov = float(db.distances(q, neigh).max())
    elig = eligible_keyframes(db, kf_id, wm, params)
    if not elig:
        return []
    d = db.distances(q, elig)
    keep = d <= params.alpha * d_cov
    order = sorted((float(dd), k) for dd, k, ok in zip(d, elig, keep) if ok)
    return [k for _, k in order[: params.top_k]]


@dataclass
class LoopConstraint:
    current: int
    matched: int
    relative: Sim3Pose  # matched camera -> current camera
    n_inliers: int
    landmark_pairs: list[tuple[int, int]] = field(default_factory=list)  # (current-side, matched-side)


def _reproject_ok(K, S: Sim3Pose, P: np.ndarray, u: np.ndarray, px: float) -> np.ndarray:
    uv, front = project_points(K, S.apply(P))
    err = np.linalg.norm(np.nan_to_num(uv, nan=1e9) - u, axis=1)
    return front & (err < px)


def verify_candidate(
    wm: WorldMap, kf_id: int, cand_id: int, K: CameraIntrinsics, params: LoopParams | None = None, seed: int = 0
) -> LoopConstraint | None:
    """Geometric check of a loop candidate with a RANSAC similarity fit.

    Returns ``None`` when fewer than ``min_inliers`` landmark pairs agree
    with one similarity under bidirectional reprojection.
    """
    params = params or LoopParams()
    a, b = wm.keyframes[kf_id], wm.keyframes[cand_id]
    ka = np.flatnonzero(a.landmark_of >= 0)
    kb = np.flatnonzero(b.landmark_of >= 0)
    if len(ka) < 3 or len(kb) < 3:
        return None
    pairs = mutual_nearest(a.keypoints.descriptors[ka], b.keypoints.descriptors[kb], ratio=params.ratio)
    if len(pairs) < max(3, params.min_inliers):
        return None
    ia, ib = ka[pairs[:, 0]], kb[pairs[:, 1]]
    la, lb = a.landmark_of[ia], b.landmark_of[ib]
    Xa = np.array([wm.landmarks[int(l)].position for l in la])
    Xb = np.array([wm.landmarks[int(l)].position for l in lb])
    Pa = a.pose.apply(Xa)
    Pb = b.pose.apply(Xb)
    ua, ub = a.meas[ia], b.meas[ib]
    rng = np.random.default_rng([seed, kf_id, cand_id])
    n = len(pairs)

    def inliers(S):
        return _reproject_ok(K, S, Pb, ua, params.reprojection_px) & _reproject_ok(
            K, S.inverse(), Pa, ub, params.reprojection_px
        )

    best = np.zeros(n, dtype=bool)
    best_S = None
    for _ in range(params.ransac_iterations):
        smp = rng.choice(n, 3, replace=False)
        try:
            S = umeyama(Pb[smp], Pa[smp])
        except EvaluationError:
            continue
        if not (np.isfinite(S.s) and S.s > 0):
            continue
        inl = inliers(S)
        if inl.sum() > best.sum():
            best, best_S = inl, S
    if best_S is None or best.sum() < params.min_inliers:
        return None
    for _ in range(3):
        S = umeyama(Pb[best], Pa[best])
        inl = inliers(S)
        if inl.sum() < best.sum():
            break
        best, best_S = inl, S
        if inl.sum() == best.sum():
            break
    if best.sum() < params.min_inliers:
        return None
    lp = [(int(x), int(y)) for x, y in zip(la[best], lb[best]) if x != y]
    return LoopConstraint(kf_id, cand_id, best_S, int(best.sum()), lp)


# --- pose graph ------------------------------------------------------------------


def sim3_from_pose(p: Pose) -> Sim3Pose:
    return Sim3Pose(p.R, p.t, 1.0)


def _inv_left_jacobian(xi: np.ndarray) -> np.ndarray:
    return np.linalg.inv(sim3_left_jacobian(xi))


class PoseGraph:
    """Residual ``log(S_i S_j^-1 M_ij^-1)`` per edge, left perturbations on every free node."""

    def __init__(self, nodes: list[int], fixed: set[int], edges: list[tuple[int, int, Sim3Pose]]):
        self.nodes = list(nodes)
        self.index = {k: i for i, k in enumerate(self.nodes)}
        self.fixed = set(fixed)
        self.col = {}
        c = 0
        for k in self.nodes:
            if k not in self.fixed:
                self.col[k] = c
                c += 7
        self.n_params = c
        self.edges = edges
        self.M_inv = [m.inverse() for _, _, m in edges]
        self.adj = [sim3_adjoint(m) for _, _, m in edges]

    def evaluate(self, x: dict, jacobian: bool = True):
        n = len(self.edges)
        r = np.zeros((n, 7))
        rows, cols, vals = [], [], []
        for e, (i, j, _) in enumerate(self.edges):
            D = x[i] @ x[j].inverse() @ self.M_inv[e]
            err = log_sim3(D)
            r[e] = err
            if not jacobian:
                continue
            if i in self.col:
                Ji = _inv_left_jacobian(err)
                rr, cc = np.meshgrid(np.arange(7) + 7 * e, np.arange(7) + self.col[i], indexing="ij")
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                vals.append(Ji.ravel())
            if j in self.col:
                Jj = -_inv_left_jacobian(-err) @ self.adj[e]
                rr, cc = np.meshgrid(np.arange(7) + 7 * e, np.arange(7) + self.col[j], indexing="ij")
                rows.append(rr.ravel())
                cols.append(cc.ravel())
                vals.append(Jj.ravel())
        if not jacobian:
            return r, None
        if vals:
            J = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(7 * n, self.n_params)
            )
        else:
            J = sp.csr_matrix((7 * n, self.n_params))
        return r, J

    def retract(self, x: dict, delta: np.ndarray) -> dict:
        out = dict(x)
        for k, c in self.col.items():
            out[k] = exp_sim3(delta[c : c + 7]) @ x[k]
        return out


def pose_graph_edges(wm: WorldMap, loop: LoopConstraint | None, min_weight: int = 100):
    poses = {k: sim3_from_pose(kf.pose) for k, kf in wm.keyframes.items()}
    seen = set()
    edges = []

    def add(i, j, M):
        key = (min(i, j), max(i, j))
        if key in seen:
            return
        seen.add(key)
        edges.append((i, j, M))

    for child, parent in wm.spanning_tree().items():
        if parent is not None:
            add(child, parent, poses[child] @ poses[parent].inverse())
    for i, kf in wm.keyframes.items():
        for j, w in kf.covisibility.items():
            if w >= min_weight and j in wm.keyframes:
                add(i, j, poses[i] @ poses[j].inverse())
    if loop is not None:
        seen.discard((min(loop.current, loop.matched), max(loop.current, loop.matched)))
        add(loop.current, loop.matched, loop.relative)
    return poses, edges


def correct_pose_graph(
    wm: WorldMap, loop: LoopConstraint, params: LoopParams | None = None, opts: SolveOptions | None = None
) -> SolveReport:
    """Distribute a loop correction over the keyframe graph and move landmarks with it.

    Works on a copy and commits only after a successful solve.
    """
    params = params or LoopParams()
    work = wm.copy()
    poses, edges = pose_graph_edges(work, loop, params.essential_weight)
    graph = PoseGraph(sorted(poses), {loop.matched}, edges)
    opts = opts or SolveOptions(max_iterations=20, update_tolerance=1e-10, policy=Policy.LM)
    new, report = solve(graph, poses, RobustKernel.none(), opts)
    for lm in work.landmarks.values():
        ref = lm.first_kf if lm.first_kf in new else min(lm.observations)
        lm.position = new[ref].inverse().apply(poses[ref].apply(lm.position[None]))[0]
    for k, S in new.items():
        if k == loop.matched:
            continue
        work.keyframes[k].pose = Pose(S.R, S.t / S.s)
    wm.replace_state(work)
    return report


def fuse_loop(wm: WorldMap, loop: LoopConstraint, params: MappingParams | None = None) -> int:
    """Merge landmark pairs found during verification, then nearby duplicates."""
    params = params or MappingParams()
    n = 0
    for cur, old in loop.landmark_pairs:
        if cur in wm.landmarks and old in wm.landmarks and cur != old:
            wm.merge_landmarks(old, cur)
            n += 1
    region = set()
    for k in (loop.current, loop.matched):
        if k in wm.keyframes:
            region.add(k)
            region.update(wm.keyframes[k].covisibility)
    for a, b in find_duplicates(wm, sorted(region), params.fuse_px, params.fuse_max_distance):
        if a in wm.landmarks and b in wm.landmarks:
            keep, drop = (a, b) if len(wm.landmarks[a].observations) >= len(wm.landmarks[b].observations) else (b, a)
            wm.merge_landmarks(keep, drop)
            n += 1
    return n


def global_bundle_adjustment(wm: WorldMap, params: MappingParams | None = None) -> SolveReport:
    """Full BA with the first keyframe fixed; the map is untouched if the solve fails."""
    if len(wm.keyframes) < 2:
        raise ValueError("global bundle adjustment needs at least two keyframes")
    work = wm.copy()
    out = global_ba(work, params=params)
    wm.replace_state(work)
    return out.report


@dataclass
class LoopEvent:
    keyframe: int
    candidates: list[int]
    constraint: LoopConstraint | None = None
    closed: bool = False
    frame_of: dict[int, int] = field(default_factory=dict)  # query and eligible keyframes -> frame index

    @property
    def detected(self) -> bool:
        return bool(self.candidates)


class LoopCloser:
    """Per-keyframe loop stage: embed, detect, verify and optionally correct."""

    def __init__(self, K: CameraIntrinsics, params: LoopParams | None = None, correct: bool = True, mapping=None):
        self.K = K
        self.params = params or LoopParams()
        self.correct = correct
        self.mapping = mapping or MappingParams()
        self.db = EmbeddingDatabase()

    def sync(self, wm: WorldMap):
        for k in [k for k in self.db.entries if k not in wm.keyframes]:
            self.db.remove(k)
        for k, kf in wm.keyframes.items():
            if k not in self.db and kf.embedding is not None:
                self.db.add(k, kf.embedding)

    def process(self, wm: WorldMap, kf_id: int) -> LoopEvent | None:
        self.sync(wm)
        if kf_id not in self.db:
            return None
        cands = detect_candidates(self.db, kf_id, wm, self.params)
        ev = LoopEvent(kf_id, cands)
        for k in [kf_id] + eligible_keyframes(self.db, kf_id, wm, self.params):
            ev.frame_of[k] = wm.keyframes[k].frame_index
        if not cands:
            return ev
        for c in cands:
            con = verify_candidate(wm, kf_id, c, self.K, self.params)
            if con is not None:
                ev.constraint = con
                break
        if ev.constraint is None or not self.correct:
            return ev
        work = wm.copy()
        correct_pose_graph(work, ev.constraint, self.params)
        fuse_loop(work, ev.constraint, self.mapping)
        if self.params.global_ba:
            global_ba(work, params=self.mapping)
        wm.replace_state(work)
        ev.closed = True
        return ev
