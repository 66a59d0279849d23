import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.transform import Rotation

from rdslam.evaluation import EvaluationError, associate_timestamps, evaluate_ate, evaluate_reconstruction, umeyama
from rdslam.geometry import Sim3Pose


def _traj(seed, n=50):
    rng = np.random.default_rng(seed)
    ts = np.arange(n) / 30.0
    P = np.cumsum(rng.normal(scale=0.1, size=(n, 3)), axis=0)
    return ts, P


def _random_sim3(rng, scale=None):
    R = Rotation.random(random_state=rng).as_matrix()
    return Sim3Pose(R, rng.normal(scale=3, size=3), float(rng.uniform(0.2, 5)) if scale is None else scale)


def test_self_ate_is_zero():
    ts, P = _traj(0)
    assert evaluate_ate(ts, P, ts, P).rmse < 1e-12
    assert evaluate_ate(ts, P, ts, P, "se3").rmse < 1e-12


def test_sim3_absorbs_scale():
    ts, P = _traj(1)
    r = evaluate_ate(ts, 2.5 * P, ts, P)
    assert r.rmse < 1e-9
    assert r.alignment.s == pytest.approx(1 / 2.5, rel=1e-12)


def test_se3_absorbs_rigid_motion_but_not_scale(rng):
    ts, P = _traj(2)
    S = _random_sim3(rng, 1.0)
    assert evaluate_ate(ts, S.apply(P), ts, P, "se3").rmse < 1e-9
    assert evaluate_ate(ts, 2.0 * P, ts, P, "se3").rmse > 1e-3


@given(st.integers(0, 2**32 - 1))
def test_ate_similarity_invariance(seed):
    rng = np.random.default_rng(seed)
    ts, P = _traj(seed)
    est = P + rng.normal(scale=0.05, size=P.shape)
    base = evaluate_ate(ts, est, ts, P).rmse
    S = _random_sim3(rng)
    assert abs(evaluate_ate(ts, S.apply(est), ts, P).rmse - base) < 1e-9
    base_se3 = evaluate_ate(ts, est, ts, P, "se3").rmse
    T = _random_sim3(rng, 1.0)
    assert abs(evaluate_ate(ts, T.apply(est), ts, P, "se3").rmse - base_se3) < 1e-9


@given(st.integers(0, 2**32 - 1))
def test_umeyama_rotation_matches_kabsch(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(30, 3))
    dst = _random_sim3(rng).apply(src) + rng.normal(scale=0.01, size=(30, 3))
    S = umeyama(src, dst)
    # with centered sets the least-squares rotation is the Kabsch solution
    a, b = src - src.mean(0), dst - dst.mean(0)
    R_ref = Rotation.align_vectors(b, a)[0].as_matrix()
    assert np.allclose(S.R, R_ref, atol=1e-9)


def test_umeyama_handles_reflection_case():
    src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    dst = src * [1, 1, -1]
    S = umeyama(src, dst)
    assert np.linalg.det(S.R) == pytest.approx(1.0)


def test_umeyama_degenerate_inputs():
    with pytest.raises(EvaluationError):
        umeyama(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(EvaluationError):
        umeyama(np.ones((5, 3)), np.zeros((5, 3)))


def test_timestamp_association():
    pairs = associate_timestamps([0.0, 0.1, 0.2, 0.5], [0.005, 0.115, 0.19, 0.3])
    assert pairs.tolist() == [[0, 0], [1, 1], [2, 2]]
    # each reference stamp used once, closest wins
    assert associate_timestamps([0.0, 0.0012], [0.0005]).tolist() == [[0, 0]]
    assert associate_timestamps([0.0, 0.0008], [0.0005]).tolist() == [[1, 0]]


def test_insufficient_overlap_raises():
    ts, P = _traj(3)
    with pytest.raises(EvaluationError):
        evaluate_ate(ts[:2], P[:2], ts, P)
    with pytest.raises(EvaluationError):
        evaluate_ate(ts + 10, P, ts, P)
    with pytest.raises(EvaluationError):
        evaluate_ate(ts, P, ts, P, "affine")


def test_reconstruction_of_subset_is_zero(rng):
    cloud = rng.normal(size=(500, 3))
    r = evaluate_reconstruction(cloud[::7], cloud)
    assert r.rmse == 0.0 and r.cumulative[0] == 1.0


def test_reconstruction_offset_from_dense_grid():
    g = np.arange(0, 1.0001, 0.002)
    X, Y = np.meshgrid(g, g)
    cloud = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    rng = np.random.default_rng(0)
    pts = np.column_stack([rng.uniform(0.1, 0.9, (200, 2)), np.full(200, 0.1)])
    r = evaluate_reconstruction(pts, cloud)
    assert abs(r.rmse - 0.1) < 0.002
    assert np.all(np.diff(r.cumulative) >= 0) and r.cumulative[-1] == 1.0


def test_reconstruction_applies_alignment(rng):
    cloud = rng.normal(size=(300, 3))
    S = _random_sim3(rng)
    moved = S.inverse().apply(cloud[:50])
    assert evaluate_reconstruction(moved, cloud, S).rmse < 1e-9


def test_reconstruction_needs_points():
    with pytest.raises(EvaluationError):
        evaluate_reconstruction(np.zeros((0, 3)), np.zeros((5, 3)))
