import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupledreg.geometry import RigidTransform, random_rotation, rotation_about_axis
from coupledreg.pose import (DegenerateGeometryError, InsufficientPairsError, RansacConfig,
                             ransac_register, weighted_procrustes)


def random_tf(rng):
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


def identity_pairs(n):
    return np.stack([np.arange(n)] * 2, axis=1)


def objective(tf, p, q, w):
    r = tf.apply(p) - q
    return float(np.sum(w * np.sum(r * r, axis=1)))


# --- weighted Procrustes ---------------------------------------------------------------

def test_exact_recovery_four_points():
    rng = np.random.default_rng(0)
    p = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    tf = random_tf(rng)
    est = weighted_procrustes(identity_pairs(4), p, tf.apply(p))
    assert np.max(np.abs(est.rotation - tf.rotation)) < 1e-9
    assert np.max(np.abs(est.translation - tf.translation)) < 1e-9


def test_zero_weight_pairs_are_inert():
    rng = np.random.default_rng(1)
    tf = random_tf(rng)
    p = rng.normal(size=(10, 3))
    q = tf.apply(p)
    q[3:] = rng.normal(size=(7, 3))            # junk
    w = np.r_[np.ones(3), np.zeros(7)]
    est = weighted_procrustes(identity_pairs(10), p, q, w)
    assert np.max(np.abs(est.matrix() - tf.matrix())) < 1e-9


def test_beats_random_perturbations():
    rng = np.random.default_rng(2)
    tf = random_tf(rng)
    p = rng.normal(size=(30, 3))
    q = tf.apply(p) + rng.normal(scale=0.05, size=(30, 3))
    w = rng.uniform(0.1, 1, 30)
    est = weighted_procrustes(identity_pairs(30), p, q, w)
    best = objective(est, p, q, w)
    for _ in range(1000):
        dR = rotation_about_axis(rng.normal(size=3), rng.normal(scale=0.05))
        cand = RigidTransform(dR @ est.rotation, est.translation + rng.normal(scale=0.02, size=3))
        assert objective(cand, p, q, w) >= best - 1e-12


def test_reflection_prone_input_gives_proper_rotation():
    # a mirrored target tempts plain SVD into det(R) = -1
    p = np.random.default_rng(3).normal(size=(8, 3))
    q = p * np.array([1.0, 1.0, -1.0])
    est = weighted_procrustes(identity_pairs(8), p, q)
    assert np.linalg.det(est.rotation) == pytest.approx(1.0, abs=1e-12)


def test_procrustes_errors():
    p = np.random.default_rng(4).normal(size=(5, 3))
    with pytest.raises(InsufficientPairsError):
        weighted_procrustes(identity_pairs(2), p, p)
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateGeometryError):
        weighted_procrustes(identity_pairs(5), line, line)
    with pytest.raises(ValueError):
        weighted_procrustes(identity_pairs(5), p, p, np.zeros(5))
    with pytest.raises(ValueError):
        weighted_procrustes(identity_pairs(5), p, p, np.ones(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_weight_scaling_and_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(12, 3)), rng.normal(size=(12, 3))
    w = rng.uniform(0.1, 1, 12)
    pairs = identity_pairs(12)
    est = weighted_procrustes(pairs, p, q, w)
    scaled = weighted_procrustes(pairs, p, q, c * w)
    assert np.max(np.abs(est.matrix() - scaled.matrix())) < 1e-12 * max(1.0, np.abs(est.matrix()).max()) * 100
    # moving both clouds by A conjugates the estimate: A est A^-1
    A = random_tf(rng)
    moved = weighted_procrustes(pairs, A.apply(p), A.apply(q), w)
    expect = A.compose(est.compose(A.inverse()))
    assert np.max(np.abs(moved.matrix() - expect.matrix())) < 1e-9
    R = est.rotation
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12 and np.linalg.det(R) > 0


# --- RANSAC ------------------------------------------------------------------------------

def outlier_instance(rng, n_in=70, n_out=30):
    tf = random_tf(rng)
    p = rng.uniform(-0.5, 0.5, size=(n_in + n_out, 3))
    q = tf.apply(p)
    q[n_in:] = rng.uniform(-0.5, 0.5, size=(n_out, 3)) + tf.translation
    return tf, p, q


def test_ransac_recovers_with_outliers():
    rng = np.random.default_rng(5)
    tf, p, q = outlier_instance(rng)
    res = ransac_register(identity_pairs(100), p, q, RansacConfig(seed=1))
    oracle = weighted_procrustes(identity_pairs(70), p, q)
    assert np.max(np.abs(res.transform.matrix() - oracle.matrix())) < 1e-3
    assert np.max(np.abs(res.transform.matrix() - tf.matrix())) < 1e-3
    assert res.inliers[:70].all() and not res.failed


def test_ransac_all_exact():
    rng = np.random.default_rng(6)
    tf = random_tf(rng)
    p = rng.normal(size=(20, 3))
    est, mask = ransac_register(identity_pairs(20), p, tf.apply(p))
    assert mask.all()
    assert np.max(np.abs(est.matrix() - tf.matrix())) < 1e-9


def test_ransac_deterministic_per_seed():
    rng = np.random.default_rng(7)
    _, p, q = outlier_instance(rng, 20, 80)
    cfg = RansacConfig(seed=42, max_iters=300)
    a = ransac_register(identity_pairs(100), p, q, cfg)
    b = ransac_register(identity_pairs(100), p, q, cfg)
    assert np.array_equal(a.transform.matrix(), b.transform.matrix())
    assert np.array_equal(a.inliers, b.inliers) and a.iterations == b.iterations


def test_ransac_returned_model_beats_every_sample():
    # replay the seeded sample stream and count inliers of each candidate
    rng = np.random.default_rng(8)
    _, p, q = outlier_instance(rng, 30, 70)
    cfg = RansacConfig(seed=3, max_iters=200, inlier_threshold=0.05)
    res = ransac_register(identity_pairs(100), p, q, cfg)
    replay = np.random.default_rng(cfg.seed)
    best = 0
    for _ in range(res.iterations):
        s = replay.choice(100, size=3, replace=False)
        try:
            cand = weighted_procrustes(np.stack([s, s], axis=1), p, q)
        except DegenerateGeometryError:
            continue
        best = max(best, int(np.sum(np.linalg.norm(cand.apply(p) - q, axis=1) < 0.05)))
    assert res.inliers.sum() >= best


def test_ransac_failure_flag_and_errors():
    rng = np.random.default_rng(9)
    p = rng.normal(size=(5, 3))
    q = rng.normal(size=(5, 3)) * 100
    res = ransac_register(identity_pairs(5), p, q, RansacConfig(inlier_threshold=1e-9, max_iters=50))
    assert res.failed and not res.inliers.any()
    with pytest.raises(InsufficientPairsError):
        ransac_register(identity_pairs(2), p, q)


def test_ransac_config_validation():
    for bad in ({"max_iters": 0}, {"inlier_threshold": 0}, {"confidence": 1.0}, {"sample_size": 2}):
        with pytest.raises(ValueError):
            RansacConfig(**bad)
