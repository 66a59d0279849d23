import numpy as np
import pytest

from rdslam import mapping as mp
from rdslam.evaluation import umeyama
from rdslam.features import detect
from rdslam.geometry import Pose, exp_se3, project_points
from rdslam.synth import WorldSpec, generate_world, render_prediction
from rdslam.worldmap import Frame

from worlds import oracle_keyframe, oracle_keypoints, oracle_map, tiny_keyframe


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldSpec(seed=2, n_landmarks=1500, n_frames=40))


def _angle_between_frames(gt, a, b):
    ca, cb = gt.poses[a].center(), gt.poses[b].center()
    return np.rad2deg(np.arccos(np.clip(gt.poses[a].R[2] @ gt.poses[b].R[2], -1, 1))), np.linalg.norm(ca - cb)


# --- bootstrap -----------------------------------------------------------------


def _two_view_correspondences(gt, a, b, n=200, seed=0):
    ta, tb = gt.tables[a], gt.tables[b]
    common = np.intersect1d(ta.ids, tb.ids)
    rng = np.random.default_rng(seed)
    ids = rng.choice(common, n, replace=False)
    ia = np.searchsorted(ta.ids, ids)
    ib = np.searchsorted(tb.ids, ids)
    return ids, ta.true_px[ia], tb.true_px[ib]


def test_two_view_noiseless_ten_degrees(world):
    # 60 degree arc over 40 frames: frames 0 and 7 are about 10 degrees apart
    ids, ua, ub = _two_view_correspondences(world, 0, 7)
    assert 9 < _angle_between_frames(world, 0, 7)[0] < 12
    tv = mp.two_view_geometry(world.K, ua, ub)
    assert tv.inliers.all() and tv.valid.all()
    # structure is in frame-0 camera coordinates up to a similarity
    truth = world.poses[0].apply(world.landmarks[ids])
    S = umeyama(tv.points, truth)
    assert np.abs(S.apply(tv.points) - truth).max() < 1e-6


def test_two_view_zero_baseline(world):
    ids, ua, _ = _two_view_correspondences(world, 0, 7)
    with pytest.raises(mp.BootstrapError):
        mp.two_view_geometry(world.K, ua, ua.copy())


def test_two_view_outlier_recall(world):
    ids, ua, ub = _two_view_correspondences(world, 0, 7, n=300, seed=1)
    rng = np.random.default_rng(5)
    bad = rng.random(len(ua)) < 0.3
    ub = ub.copy()
    ub[bad] = rng.uniform([0, 0], [639, 479], size=(bad.sum(), 2))
    tv = mp.two_view_geometry(world.K, ua, ub, rng)
    recall = (tv.inliers & ~bad).sum() / (~bad).sum()
    assert recall >= 0.95


def test_too_few_matches(world):
    _, ua, ub = _two_view_correspondences(world, 0, 7, n=40)
    with pytest.raises(mp.BootstrapError):
        mp.two_view_geometry(world.K, ua, ub)


def test_bootstrap_from_rendered_frames(world):
    frames = []
    for k in (0, 9):
        maps, kps = detect(render_prediction(world, k))
        frames.append(Frame(k, float(world.timestamps[k]), maps, kps))
    wm = mp.bootstrap_two_view(frames[0], frames[1], world.K)
    wm.check_invariants()
    assert len(wm.landmarks) > 200
    assert np.array_equal(wm.keyframes[0].pose.matrix(), np.eye(4))
    ids = wm.keyframes[0].tracked_landmarks()
    depth = wm.keyframes[0].pose.apply(np.array([wm.landmarks[int(i)].position for i in ids]))[:, 2]
    assert np.median(depth) == pytest.approx(1.0, abs=1e-9)
    # relative motion agrees with ground truth up to scale
    rel = wm.keyframes[1].pose
    truth = world.poses[9] @ world.poses[0].inverse()
    assert np.degrees(np.arccos((np.trace(rel.R.T @ truth.R) - 1) / 2)) < 0.2
    assert np.dot(rel.t / np.linalg.norm(rel.t), truth.t / np.linalg.norm(truth.t)) > 0.999


# --- keyframe policy and candidates ----------------------------------------------


def test_should_insert_keyframe_examples():
    assert not mp.should_insert_keyframe(90, 100, 3)
    assert mp.should_insert_keyframe(50, 100, 3)
    assert mp.should_insert_keyframe(90, 100, 25)


def _graph(weights):
    from rdslam.worldmap import WorldMap

    wm = WorldMap()
    wm.add_keyframe(tiny_keyframe(0))
    for k in weights:
        wm.add_keyframe(tiny_keyframe(k))
    wm.keyframes[0].covisibility = dict(weights)
    return wm


def test_select_candidates_examples():
    wm = _graph({1: 30, 2: 12, 3: 5})
    assert mp.select_candidates(wm, 0, 2) == [1, 2]
    assert mp.select_candidates(wm, 0, 10) == [1, 2, 3]
    wm = _graph({4: 10, 2: 10})
    assert mp.select_candidates(wm, 0, 1) == [2]


# --- matching -------------------------------------------------------------------------


def _covisible_pair(world, a=10, b=13, noise=0.0, seed=0):
    ka, ia = oracle_keyframe(world, a, 0)
    kb, ib = oracle_keyframe(world, b, 1)
    if noise > 0:
        rng = np.random.default_rng(seed)
        for kf in (ka, kb):
            # noise level is the expected norm of the added vector, as in the synthesizer
            d = kf.keypoints.descriptors
            d = d + rng.normal(scale=noise / np.sqrt(d.shape[1]), size=d.shape)
            kf.keypoints.descriptors = d / np.linalg.norm(d, axis=1, keepdims=True)
    return ka, ia, kb, ib


def test_ann_identical_and_orthogonal(world):
    ka, _ = oracle_keyframe(world, 10, 0)
    kb, _ = oracle_keyframe(world, 10, 1)
    pairs = mp.match_untracked_ann(ka, kb)
    assert pairs == [(i, i) for i in range(len(ka.keypoints))]
    kb.keypoints.descriptors = np.zeros_like(kb.keypoints.descriptors)
    kb.keypoints.descriptors[:, -1] = 1.0
    ka.keypoints.descriptors[:, -1] = 0.0
    ka.keypoints.descriptors /= np.linalg.norm(ka.keypoints.descriptors, axis=1, keepdims=True)
    assert mp.match_untracked_ann(ka, kb) == []


def test_ann_precision_with_descriptor_noise(world):
    ka, ia, kb, ib = _covisible_pair(world, noise=0.05)
    pairs = mp.match_untracked_ann(ka, kb)
    correct = sum(ia[i] == ib[j] for i, j in pairs)
    assert len(pairs) > 100
    assert correct / len(pairs) >= 0.98


def test_epipolar_noiseless_pairs_are_correct(world):
    ka, ia, kb, ib = _covisible_pair(world)
    pairs = mp.match_epipolar(ka, kb, world.K)
    assert len(pairs) > 100
    assert all(ia[i] == ib[j] for i, j in pairs)


def test_epipolar_gate_rejects_distant_candidate(world):
    from rdslam.geometry import epipolar_line, relative_pose

    ka, ia, kb, ib = _covisible_pair(world)
    j = int(np.flatnonzero(np.isin(ib, ia))[0])
    i = int(np.flatnonzero(ia == ib[j])[0])
    # keep only the true partner, then push it 10 px off the line along its normal
    ka.landmark_of[:] = 0
    ka.landmark_of[i] = -1
    kb.landmark_of[:] = 0
    kb.landmark_of[j] = -1
    assert mp.match_epipolar(ka, kb, world.K) == [(i, j)]
    line = epipolar_line(world.K, relative_pose(ka.pose, kb.pose), ka.meas[i])
    normal = line[:2] / np.hypot(line[0], line[1])
    kb.meas[j] = kb.meas[j] + 10.0 * normal
    assert mp.match_epipolar(ka, kb, world.K) == []
    kb.meas[j] = kb.meas[j] - 8.5 * normal
    assert mp.match_epipolar(ka, kb, world.K, tau=2.0) == [(i, j)]


def test_epipolar_beats_ann_under_repeated_texture(world):
    ka, ia, kb, ib = _covisible_pair(world)
    # every landmark shares its descriptor with one other landmark
    uniq = np.unique(np.concatenate([ia, ib]))
    rng = np.random.default_rng(7)
    partner = dict(zip(uniq, rng.permutation(uniq)))
    for kf, ids in ((ka, ia), (kb, ib)):
        base = np.array([min(l, partner[l]) for l in ids])
        kf.keypoints.descriptors = world.descriptors[base].copy()
    def false_rate(pairs):
        return sum(ia[i] != ib[j] for i, j in pairs) / max(len(pairs), 1)
    ann = mp.match_untracked_ann(ka, kb, ratio=1.0)
    epi = mp.match_epipolar(ka, kb, world.K)
    assert len(epi) > 50 and len(ann) > 50
    assert false_rate(epi) < false_rate(ann)


# --- landmark creation -----------------------------------------------------------------


def _empty_pair_map(world, a=10, b=16):
    from rdslam.worldmap import WorldMap

    wm = WorldMap(world.K)
    ka, ia = oracle_keyframe(world, a, 0)
    kb, ib = oracle_keyframe(world, b, 1)
    wm.add_keyframe(ka)
    wm.add_keyframe(kb)
    return wm, ia, ib


def test_create_from_noiseless_oracle_pairs(world):
    wm, ia, ib = _empty_pair_map(world)
    index_b = {int(l): j for j, l in enumerate(ib)}
    pairs = [(i, index_b[int(l)]) for i, l in enumerate(ia) if int(l) in index_b]
    stats = mp.MappingStats()
    created = mp.create_landmarks(wm, 0, 1, pairs, world.K, stats=stats)
    assert len(created) == len(pairs) == stats.created
    for lm_id, (i, _) in zip(created, pairs):
        assert np.linalg.norm(wm.landmarks[lm_id].position - world.landmarks[ia[i]]) < 1e-6
    wm.check_invariants()
    assert wm.keyframes[0].covisibility == {1: len(pairs)}


def test_create_rejects_negative_depth(world):
    wm, ia, ib = _empty_pair_map(world)
    kb = wm.keyframes[1]
    # a target pixel whose ray meets the source ray behind camera b
    index_b = {int(l): j for j, l in enumerate(ib)}
    i, j = next((i, index_b[int(l)]) for i, l in enumerate(ia) if int(l) in index_b)
    stats = mp.MappingStats()
    Xb = kb.pose.apply(world.landmarks[ia[i]])
    behind = kb.pose.inverse().apply(Xb * [-1, -1, -1])
    uv, _ = project_points(world.K, wm.keyframes[0].pose.apply(behind[None]))
    wm.keyframes[0].meas[i] = uv[0]
    assert mp.create_landmarks(wm, 0, 1, [(i, j)], world.K, stats=stats) == []
    assert stats.rejected_depth + stats.rejected_parallax + stats.rejected_chi2 == 1


def test_create_rejects_low_parallax(world):
    wm, ia, _ = _empty_pair_map(world, 10, 11)
    # second view: frame 10 shifted sideways so rays meet at about 0.2 degrees
    a, b = wm.keyframes[0], wm.keyframes[1]
    depth = np.median(a.pose.apply(world.landmarks[ia])[:, 2])
    shift = np.deg2rad(0.2) * depth
    b.pose = Pose(a.pose.R, a.pose.t - np.array([shift, 0.0, 0.0]))
    uv, _ = project_points(world.K, b.pose.apply(world.landmarks[ia]))
    b.keypoints = a.keypoints
    b.meas = uv
    b.covs = a.covs.copy()
    b.landmark_of = np.full(len(uv), -1, dtype=np.int64)
    X = world.landmarks[ia]
    ca, cb = a.pose.center(), b.pose.center()
    ra, rb = X - ca, X - cb
    par = np.degrees(np.arccos(np.clip(np.sum(ra * rb, 1) / np.linalg.norm(ra, axis=1) / np.linalg.norm(rb, axis=1), -1, 1)))
    in_view = (uv[:, 0] >= 0) & (uv[:, 0] < 640) & (uv[:, 1] >= 0) & (uv[:, 1] < 480)
    low = [(i, i) for i in np.flatnonzero(in_view & (par < 0.5))]
    assert len(low) > 50
    params = mp.MappingParams(min_parallax_deg=1.0)
    stats = mp.MappingStats()
    assert mp.create_landmarks(wm, 0, 1, low, world.K, params, stats) == []
    assert stats.rejected_parallax == len(low)
    assert not wm.landmarks


def test_map_new_keyframe_keeps_invariants(world):
    wm, labels, _ = oracle_map(world, [8, 12])
    kf, ids = oracle_keyframe(world, 16, 2)
    wm.add_keyframe(kf)
    # track whatever the first two keyframes share with the new one
    lab_new = {int(l): j for j, l in enumerate(ids)}
    for lm_id, lm in list(wm.landmarks.items()):
        k0 = next(iter(lm.observations))
        l = int(labels[k0][lm.observations[k0]])
        if l in lab_new:
            wm.add_observation(lm_id, 2, lab_new[l])
    before = len(wm.landmarks)
    stats = mp.MappingStats()
    created = mp.map_new_keyframe(wm, 2, world.K, stats=stats)
    wm.check_invariants()
    assert len(created) > 0 and len(wm.landmarks) == before + len(created)
    for lm_id in created:
        lm = wm.landmarks[lm_id]
        obs = {k: int(labels[k][j]) if k < 2 else int(ids[j]) for k, j in lm.observations.items()}
        assert len(set(obs.values())) == 1
        for k in lm.observations:
            assert wm.keyframes[k].pose.apply(lm.position)[2] > 0


# --- local BA --------------------------------------------------------------------------


def _perturbed_map(world, frames, sigma, seed=0):
    rng = np.random.default_rng(seed)
    D = world.spec.extent
    poses = [world.poses[k] if n == 0 else Pose(world.poses[k].R, world.poses[k].t + rng.normal(scale=sigma * D, size=3)) for n, k in enumerate(frames)]
    positions = world.landmarks + rng.normal(scale=sigma * D, size=world.landmarks.shape)
    return oracle_map(world, frames, positions, poses)


def _landmark_rmse(world, wm, labels):
    err = []
    for lm in wm.landmarks.values():
        k = next(iter(lm.observations))
        err.append(np.linalg.norm(lm.position - world.landmarks[labels[k][lm.observations[k]]]))
    return float(np.sqrt(np.mean(np.square(err))))


def _rms_reprojection(wm):
    e = []
    for lm in wm.landmarks.values():
        for k, j in lm.observations.items():
            kf = wm.keyframes[k]
            uv, _ = project_points(wm.K, kf.pose.apply(lm.position[None]))
            e.append(np.linalg.norm(uv[0] - kf.meas[j]))
    return float(np.sqrt(np.mean(np.square(e))))


def test_local_ba_recovers_perturbed_map(world):
    frames = [10, 12, 14, 16, 18]
    wm, labels, _ = _perturbed_map(world, frames, 0.005)
    before = _landmark_rmse(world, wm, labels)
    fixed_pose = wm.keyframes[0].pose.matrix().copy()
    out = mp.local_bundle_adjustment(wm, 2)
    wm.check_invariants()
    assert 0 in out.fixed
    assert np.array_equal(wm.keyframes[0].pose.matrix(), fixed_pose)
    assert _rms_reprojection(wm) < 0.5
    assert _landmark_rmse(world, wm, labels) * 5 <= before
    assert out.report.final_cost <= out.report.initial_cost


def test_local_ba_fixed_point(world):
    wm, labels, _ = oracle_map(world, [10, 12, 14, 16])
    poses = {k: kf.pose.matrix().copy() for k, kf in wm.keyframes.items()}
    pts = {l: lm.position.copy() for l, lm in wm.landmarks.items()}
    out = mp.local_bundle_adjustment(wm, 1)
    assert out.report.initial_cost - out.report.final_cost < 1e-10
    assert max(np.abs(wm.keyframes[k].pose.matrix() - P).max() for k, P in poses.items()) < 1e-8
    assert max(np.abs(wm.landmarks[l].position - X).max() for l, X in pts.items()) < 1e-8


def test_local_ba_removes_outlier_observations(world):
    wm, labels, _ = oracle_map(world, [10, 12, 14, 16])
    rng = np.random.default_rng(3)
    n_obs = sum(len(lm.observations) for lm in wm.landmarks.values())
    # at most one corrupted view per landmark, so each outlier is identifiable
    lms = rng.permutation(sorted(wm.landmarks))[: n_obs // 10]
    corrupted = set()
    for l in lms:
        obs = wm.landmarks[int(l)].observations
        k = int(rng.choice(sorted(obs)))
        kf = wm.keyframes[k]
        kf.meas[obs[k]] = kf.meas[obs[k]] + rng.choice([-1, 1], 2) * rng.uniform(8, 30, 2)
        corrupted.add((int(l), k))
    out = mp.local_bundle_adjustment(wm, 1)
    wm.check_invariants()
    remaining = {(l, k) for l, lm in wm.landmarks.items() for k in lm.observations}
    assert not (corrupted & remaining)
    assert out.stats.removed_observations >= len(corrupted)


def test_local_ba_partitions_observers(world):
    # keyframes 0 and 3 see nothing in common with keyframe 1 except through shared landmarks
    wm, labels, _ = oracle_map(world, [0, 10, 12, 30])
    target = 2
    local = {target, *wm.keyframes[target].covisibility}
    lms = {int(l) for k in local for l in wm.keyframes[k].tracked_landmarks()}
    observers = {k for l in lms for k in wm.landmarks[l].observations}
    before = {k: wm.keyframes[k].pose.matrix().copy() for k in wm.keyframes}
    out = mp.local_bundle_adjustment(wm, target)
    assert set(out.fixed).isdisjoint(out.optimized)
    assert set(out.fixed) | set(out.optimized) == observers | local
    assert set(out.fixed) >= (observers - local) | ({0} & local)
    for k in out.fixed:
        assert np.array_equal(wm.keyframes[k].pose.matrix(), before[k])


# --- culling and fusion ------------------------------------------------------------------


def test_duplicate_view_keyframe_is_culled(world):
    wm, labels, _ = oracle_map(world, [10, 12, 12, 12, 14])
    stats = mp.cull_and_fuse(wm)
    wm.check_invariants()
    assert stats.culled_keyframes >= 1
    assert len({wm.keyframes[k].frame_index for k in wm.keyframes if wm.keyframes[k].frame_index == 12}) == 1
    assert sum(wm.keyframes[k].frame_index == 12 for k in wm.keyframes) < 3


def test_no_redundancy_no_mutations(world):
    wm, labels, _ = oracle_map(world, [0, 10, 20])
    before = (sorted(wm.keyframes), sorted(wm.landmarks))
    stats = mp.cull_and_fuse(wm)
    assert stats.fused == 0 and stats.culled_keyframes == 0
    assert (sorted(wm.keyframes), sorted(wm.landmarks)) == before


def test_duplicate_landmarks_are_fused(world):
    wm, labels, lm_of = oracle_map(world, [10, 12, 14])
    # split one three-view landmark into two that observe disjoint keyframes
    l = next(l for l, lm in wm.landmarks.items() if len(lm.observations) == 3)
    lm = wm.landmarks[l]
    j2 = lm.observations[2]
    wm.remove_observation(l, 2)
    twin = wm.add_landmark(lm.position + 1e-4, lm.descriptor, {2: j2})
    stats = mp.cull_and_fuse(wm, protect=set(wm.keyframes))
    wm.check_invariants()
    assert stats.fused >= 1
    survivors = [x for x in (l, twin.id) if x in wm.landmarks]
    assert len(survivors) == 1
    assert set(wm.landmarks[survivors[0]].observations) == {0, 1, 2}
