"""Oracle keyframes built straight from synthetic ground truth."""

import numpy as np

from rdslam.features import CELL, KeypointSet
from rdslam.worldmap import Keyframe, WorldMap


def oracle_keypoints(gt, k, noisy=False, descriptors=None):
    """Keypoints at the exact (or jittered) projections of frame ``k``'s claimed landmarks.

    Returns the set and the landmark id of each keypoint.
    """
    t = gt.tables[k]
    sel = np.flatnonzero(t.claimed)
    ids = t.ids[sel]
    u = (t.obs_px if noisy else t.true_px)[sel].astype(float)
    K = gt.K
    grid = np.full((K.height // CELL, K.width // CELL), -1, dtype=np.int64)
    cells = np.floor(u / CELL).astype(int)
    keep = np.ones(len(u), bool)
    for i, (cx, cy) in enumerate(cells):
        if grid[cy, cx] >= 0:
            keep[i] = False
            continue
        grid[cy, cx] = int(keep[:i].sum())
    u, ids = u[keep], ids[keep]
    d = gt.descriptors[ids] if descriptors is None else descriptors[keep]
    n = len(u)
    kps = KeypointSet(u.copy(), u.copy(), np.tile(np.eye(2), (n, 1, 1)), d, np.ones(n), grid)
    return kps, ids


def oracle_keyframe(gt, k, kf_id, pose=None, noisy=False):
    kps, ids = oracle_keypoints(gt, k, noisy)
    kf = Keyframe(kf_id, k, float(gt.timestamps[k]), gt.poses[k] if pose is None else pose, kps, kps.means.copy(), kps.covs.copy())
    return kf, ids


def oracle_map(gt, frames, positions=None, poses=None):
    """Map whose landmarks are the true points observed by at least two of ``frames``."""
    wm = WorldMap(gt.K)
    labels = {}
    for n, k in enumerate(frames):
        kf, ids = oracle_keyframe(gt, k, n, None if poses is None else poses[n])
        wm.add_keyframe(kf)
        labels[n] = ids
    seen = {}
    for n, ids in labels.items():
        for j, l in enumerate(ids):
            seen.setdefault(int(l), []).append((n, j))
    lm_of = {}
    for l, obs in sorted(seen.items()):
        if len(obs) < 2:
            continue
        X = gt.landmarks[l] if positions is None else positions[l]
        lm = wm.add_landmark(X, gt.descriptors[l], dict(obs))
        lm_of[l] = lm.id
    return wm, labels, lm_of


def tiny_keyframe(kf_id, n=4, dim=4):
    kps = KeypointSet(np.zeros((n, 2)), np.zeros((n, 2)), np.tile(np.eye(2), (n, 1, 1)), np.eye(n, dim), np.ones(n), np.full((2, 2), -1))
    from rdslam.geometry import Pose

    return Keyframe(kf_id, kf_id, float(kf_id), Pose.identity(), kps, kps.means, kps.covs)


def segmented_map(gt, frames, drift=1.0, max_gap=2):
    """Oracle map where a landmark seen again after a long gap is a separate, unlinked landmark.

    This mirrors a map before loop closure: revisited structure is duplicated
    and covisibility only links keyframes close in time. ``drift`` accrues a
    geometric scale drift about the world origin from 1 at the first keyframe
    to ``drift`` at the last, applied to camera centers and landmarks alike.
    """
    from rdslam.geometry import Pose
    from rdslam.synth import frame_embedding

    n = len(frames)
    scale = drift ** (np.arange(n) / max(n - 1, 1))
    wm = WorldMap(gt.K)
    labels = {}
    for i, k in enumerate(frames):
        P = gt.poses[k]
        pose = Pose(P.R, P.t * scale[i])
        kf, ids = oracle_keyframe(gt, k, i, pose)
        kf.embedding = frame_embedding(gt, gt.tables[k].ids[gt.tables[k].claimed])
        wm.add_keyframe(kf)
        labels[i] = ids
    seen = {}
    for i, ids in labels.items():
        for j, l in enumerate(ids):
            seen.setdefault(int(l), []).append((i, j))
    source = {}
    for l, obs in sorted(seen.items()):
        runs, cur = [], [obs[0]]
        for o in obs[1:]:
            if o[0] - cur[-1][0] <= max_gap:
                cur.append(o)
            else:
                runs.append(cur)
                cur = [o]
        runs.append(cur)
        for run in runs:
            if len(run) < 2:
                continue
            lm = wm.add_landmark(gt.landmarks[l] * scale[run[0][0]], gt.descriptors[l], dict(run))
            source[lm.id] = l
    return wm, labels, source, scale


def map_snapshot(wm):
    """Copies of every pose, association and landmark for bit-level comparison."""
    return (
        {k: (kf.pose.R.copy(), kf.pose.t.copy(), kf.landmark_of.copy(), dict(kf.covisibility)) for k, kf in wm.keyframes.items()},
        {l: (lm.position.copy(), dict(lm.observations)) for l, lm in wm.landmarks.items()},
    )


def same_snapshot(a, b):
    (ka, la), (kb, lb) = a, b
    if ka.keys() != kb.keys() or la.keys() != lb.keys():
        return False
    for k in ka:
        R, t, lo, cov = ka[k]
        R2, t2, lo2, cov2 = kb[k]
        if not (np.array_equal(R, R2) and np.array_equal(t, t2) and np.array_equal(lo, lo2) and cov == cov2):
            return False
    return all(np.array_equal(la[l][0], lb[l][0]) and la[l][1] == lb[l][1] for l in la)
