"""Keyframes, landmarks and the covisibility bookkeeping that ties them together."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .features import KeypointSet, ParamMode, RepeatabilityMaps
from .geometry import Pose


class MapError(RuntimeError):
    pass


@dataclass
class Frame:
    index: int
    timestamp: float
    maps: RepeatabilityMaps | None
    keypoints: KeypointSet
    embedding: np.ndarray | None = None
    pose: Pose | None = None
    tracked: bool = False
    ref_keyframe: int | None = None


@dataclass
class Keyframe:
    id: int
    frame_index: int
    timestamp: float
    pose: Pose
    keypoints: KeypointSet
    meas: np.ndarray  # (N, 2) measurement per keypoint under the run's mode
    covs: np.ndarray  # (N, 2, 2)
    embedding: np.ndarray | None = None
    maps: RepeatabilityMaps | None = None
    landmark_of: np.ndarray = None  # keypoint -> landmark id, -1 when untracked
    covisibility: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.landmark_of is None:
            self.landmark_of = np.full(len(self.keypoints), -1, dtype=np.int64)

    @classmethod
    def from_frame(cls, kf_id: int, frame: Frame, pose: Pose, mode: ParamMode, keep_maps: bool = False):
        meas, covs = frame.keypoints.measurements(mode)
        return cls(
            kf_id,
            frame.index,
            frame.timestamp,
            pose,
            frame.keypoints,
            meas,
            covs,
            frame.embedding,
            frame.maps if keep_maps else None,
        )

    def untracked(self) -> np.ndarray:
        return np.flatnonzero(self.landmark_of < 0)

    def tracked_landmarks(self) -> np.ndarray:
        return self.landmark_of[self.landmark_of >= 0]


@dataclass
class Landmark:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    observations: dict[int, int] = field(default_factory=dict)  # keyframe id -> keypoint index
    first_kf: int = -1
    last_kf: int = -1


class WorldMap:
    """Mutable SLAM state with exact covisibility counts.

    Covisibility weights are updated incrementally on every observation change;
    :meth:`recompute_covisibility` rebuilds them from scratch for checking.
    """

    def __init__(self, K=None):
        self.K = K
        self.keyframes: dict[int, Keyframe] = {}
        self.landmarks: dict[int, Landmark] = {}
        self.retired: dict[int, tuple[int, Pose]] = {}  # culled kf -> (anchor kf, T_kf T_anchor^-1)
        self.next_kf = 0
        self.next_lm = 0

    # construction

    def add_keyframe(self, kf: Keyframe) -> Keyframe:
        if kf.id in self.keyframes:
            raise MapError(f"keyframe {kf.id} exists")
        self.keyframes[kf.id] = kf
        self.next_kf = max(self.next_kf, kf.id + 1)
        return kf

    def new_keyframe_id(self) -> int:
        return self.next_kf

    def add_landmark(self, position, descriptor, observations: dict[int, int] | None = None) -> Landmark:
        lm = Landmark(self.next_lm, np.asarray(position, dtype=float).copy(), np.asarray(descriptor, dtype=float).copy())
        self.next_lm += 1
        self.landmarks[lm.id] = lm
        for kf_id, kp in sorted((observations or {}).items()):
            self.add_observation(lm.id, kf_id, kp)
        return lm

    def add_observation(self, lm_id: int, kf_id: int, kp: int):
        lm = self.landmarks[lm_id]
        kf = self.keyframes[kf_id]
        if kf_id in lm.observations:
            raise MapError(f"landmark {lm_id} already observed in keyframe {kf_id}")
        if kf.landmark_of[kp] >= 0:
            raise MapError(f"keypoint {kp} of keyframe {kf_id} already tracks landmark {kf.landmark_of[kp]}")
        for other in lm.observations:
            kf.covisibility[other] = kf.covisibility.get(other, 0) + 1
            o = self.keyframes[other]
            o.covisibility[kf_id] = o.covisibility.get(kf_id, 0) + 1
        lm.observations[kf_id] = kp
        kf.landmark_of[kp] = lm_id
        if lm.first_kf < 0 or kf_id < lm.first_kf:
            lm.first_kf = kf_id
        if kf_id >= lm.last_kf:
            lm.last_kf = kf_id
            lm.descriptor = kf.keypoints.descriptors[kp].copy()

    def remove_observation(self, lm_id: int, kf_id: int):
        lm = self.landmarks[lm_id]
        kp = lm.observations.pop(kf_id)
        kf = self.keyframes[kf_id]
        kf.landmark_of[kp] = -1
        for other in lm.observations:
            for a, b in ((kf_id, other), (other, kf_id)):
                c = self.keyframes[a].covisibility
                c[b] -= 1
                if c[b] == 0:
                    del c[b]
        if lm.observations:
            lm.first_kf = min(lm.observations)
            if kf_id == lm.last_kf:
                lm.last_kf = max(lm.observations)
                last = self.keyframes[lm.last_kf]
                lm.descriptor = last.keypoints.descriptors[lm.observations[lm.last_kf]].copy()

    def remove_landmark(self, lm_id: int):
        lm = self.landmarks[lm_id]
        for kf_id in list(lm.observations):
            self.remove_observation(lm_id, kf_id)
        del self.landmarks[lm_id]

    def remove_keyframe(self, kf_id: int):
        """Drop a keyframe and its observations; landmarks left with < 2 observations go too."""
        kf = self.keyframes[kf_id]
        cov = dict(kf.covisibility)
        affected = [int(l) for l in kf.tracked_landmarks()]
        for lm_id in affected:
            self.remove_observation(lm_id, kf_id)
        for lm_id in affected:
            if lm_id in self.landmarks and len(self.landmarks[lm_id].observations) < 2:
                self.remove_landmark(lm_id)
        anchor = best_neighbor(cov, exclude={kf_id}, alive=self.keyframes)
        if anchor is None:
            older = [k for k in self.keyframes if k < kf_id]
            newer = [k for k in self.keyframes if k > kf_id]
            anchor = max(older) if older else (min(newer) if newer else None)
        if anchor is not None:
            self.retired[kf_id] = (anchor, kf.pose @ self.keyframes[anchor].pose.inverse())
        del self.keyframes[kf_id]

    def merge_landmarks(self, keep: int, drop: int):
        """Move ``drop``'s observations onto ``keep`` where that keyframe is free."""
        a = self.landmarks[keep]
        b = self.landmarks[drop]
        moves = [(kf_id, kp) for kf_id, kp in b.observations.items() if kf_id not in a.observations]
        self.remove_landmark(drop)
        for kf_id, kp in moves:
            self.add_observation(keep, kf_id, kp)

    # queries

    def resolve_pose(self, kf_id: int) -> Pose:
        """Current pose of a keyframe, following retirement anchors for culled ones."""
        rel = Pose.identity()
        k = kf_id
        seen = set()
        while k not in self.keyframes:
            if k in seen or k not in self.retired:
                raise MapError(f"keyframe {kf_id} cannot be resolved")
            seen.add(k)
            anchor, r = self.retired[k]
            rel = rel @ r
            k = anchor
        return rel @ self.keyframes[k].pose

    def resolve_anchor(self, kf_id: int) -> tuple[int, Pose]:
        rel = Pose.identity()
        k = kf_id
        while k not in self.keyframes:
            anchor, r = self.retired[k]
            rel = rel @ r
            k = anchor
        return k, rel

    def landmark_arrays(self, ids=None):
        ids = np.array(sorted(self.landmarks) if ids is None else list(ids), dtype=np.int64)
        if len(ids) == 0:
            return ids, np.zeros((0, 3)), np.zeros((0, 0))
        pos = np.array([self.landmarks[i].position for i in ids])
        desc = np.array([self.landmarks[i].descriptor for i in ids])
        return ids, pos, desc

    def local_landmarks(self, kf_id: int, n_neighbors: int = 10) -> np.ndarray:
        kf = self.keyframes[kf_id]
        kfs = [kf_id] + [k for k in top_neighbors(kf.covisibility, n_neighbors) if k in self.keyframes]
        ids = set()
        for k in kfs:
            ids.update(int(l) for l in self.keyframes[k].tracked_landmarks())
        return np.array(sorted(ids), dtype=np.int64)

    def recompute_covisibility(self) -> dict[int, dict[int, int]]:
        cov: dict[int, dict[int, int]] = {k: {} for k in self.keyframes}
        for lm in self.landmarks.values():
            obs = sorted(lm.observations)
            for i, a in enumerate(obs):
                for b in obs[i + 1 :]:
                    cov[a][b] = cov[a].get(b, 0) + 1
                    cov[b][a] = cov[b].get(a, 0) + 1
        return cov

    def spanning_tree(self) -> dict[int, int | None]:
        """Maximum-covisibility spanning tree as child -> parent, rooted at the oldest keyframe.

        Disconnected components are attached to the closest-in-time keyframe
        already in the tree so the result always spans every keyframe.
        """
        ids = sorted(self.keyframes)
        if not ids:
            return {}
        parent: dict[int, int | None] = {ids[0]: None}
        best: dict[int, tuple[int, int]] = {}

        def relax(k):
            for n, w in self.keyframes[k].covisibility.items():
                if n in parent or n not in self.keyframes:
                    continue
                cur = best.get(n)
                if cur is None or w > cur[0] or (w == cur[0] and k < cur[1]):
                    best[n] = (w, k)

        relax(ids[0])
        while len(parent) < len(ids):
            if best:
                n = min(best, key=lambda x: (-best[x][0], best[x][1], x))
                parent[n] = best.pop(n)[1]
            else:
                n = next(k for k in ids if k not in parent)
                inside = np.array(sorted(parent))
                parent[n] = int(inside[np.argmin(np.abs(inside - n))])
            relax(n)
        return parent

    def check_invariants(self) -> None:
        """Raise :class:`MapError` if observation symmetry or covisibility counts are broken."""
        for lm in self.landmarks.values():
            for kf_id, kp in lm.observations.items():
                if kf_id not in self.keyframes:
                    raise MapError(f"landmark {lm.id} observed by missing keyframe {kf_id}")
                if self.keyframes[kf_id].landmark_of[kp] != lm.id:
                    raise MapError(f"asymmetric observation {lm.id} <-> ({kf_id}, {kp})")
        for kf in self.keyframes.values():
            for kp in np.flatnonzero(kf.landmark_of >= 0):
                lm_id = int(kf.landmark_of[kp])
                lm = self.landmarks.get(lm_id)
                if lm is None or lm.observations.get(kf.id) != kp:
                    raise MapError(f"keyframe {kf.id} keypoint {kp} lists stale landmark {lm_id}")
        cov = self.recompute_covisibility()
        for k, kf in self.keyframes.items():
            if kf.covisibility != cov[k]:
                raise MapError(f"covisibility of keyframe {k} out of date")

    def copy(self) -> "WorldMap":
        """Deep copy of mutable state; keypoint sets and maps are shared read-only."""
        out = WorldMap(self.K)
        out.next_kf, out.next_lm = self.next_kf, self.next_lm
        out.retired = dict(self.retired)
        for k, kf in self.keyframes.items():
            c = copy.copy(kf)
            c.landmark_of = kf.landmark_of.copy()
            c.covisibility = dict(kf.covisibility)
            out.keyframes[k] = c
        for i, lm in self.landmarks.items():
            out.landmarks[i] = Landmark(
                lm.id, lm.position.copy(), lm.descriptor.copy(), dict(lm.observations), lm.first_kf, lm.last_kf
            )
        return out

    def replace_state(self, other: "WorldMap") -> None:
        """Commit a working copy produced by :meth:`copy`."""
        self.keyframes = other.keyframes
        self.landmarks = other.landmarks
        self.retired = other.retired
        self.next_kf, self.next_lm = other.next_kf, other.next_lm


def top_neighbors(covisibility: dict[int, int], n: int) -> list[int]:
    """Highest-weight neighbors, ties broken by smaller id."""
    order = sorted(covisibility.items(), key=lambda kv: (-kv[1], kv[0]))
    return [k for k, _ in order[:n]]


def best_neighbor(covisibility: dict[int, int], exclude=(), alive=None) -> int | None:
    for k in top_neighbors(covisibility, len(covisibility)):
        if k in exclude or (alive is not None and k not in alive):
            continue
        return k
    return None
