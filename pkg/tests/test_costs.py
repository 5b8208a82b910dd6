import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupledreg.costs import (CostBundle, DegenerateFeatureError, ShapeError, build_cross_cost,
                              build_structure_cost, euclid_structure_distance, feature_distance,
                              gw_objective, gw_term)
from coupledreg.geometry import RigidTransform, random_rotation


def gw_term_loops(Cp, Cq, G):
    n, m = G.shape
    H = np.zeros((n, m))
    for k, l in itertools.product(range(n), range(m)):
        for i, j in itertools.product(range(n), range(m)):
            H[k, l] += (Cp[i, k] - Cq[j, l]) ** 2 * G[i, j]
    return H


def gw_objective_loops(Cp, Cq, G):
    n, m = G.shape
    total = 0.0
    for i, j, k, l in itertools.product(range(n), range(m), range(n), range(m)):
        total += G[i, j] * G[k, l] * (Cp[i, k] - Cq[j, l]) ** 2
    return total


def sym(rng, n):
    A = rng.uniform(0, 2, size=(n, n))
    A = (A + A.T) / 2
    np.fill_diagonal(A, 0)
    return A


# --- scalar distances ------------------------------------------------------------

def test_feature_distance_examples():
    f = np.array([0.3, -1.2, 2.0])
    assert feature_distance(f, f) == 0.0
    assert feature_distance([1, 0], [0, 1]) == pytest.approx(np.sqrt(2))
    assert feature_distance(f, 2 * f) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DegenerateFeatureError):
        feature_distance([0, 0], [1, 0])


def test_euclid_structure_distance_examples():
    assert euclid_structure_distance([1, 2, 3], [1, 2, 3]) == 0.0
    assert euclid_structure_distance([0, 0, 0], [1, 0, 0]) == pytest.approx(2 * np.tanh(1.0))
    assert euclid_structure_distance([0, 0, 0], [1, 0, 0]) == pytest.approx(1.52318, abs=1e-5)
    assert abs(euclid_structure_distance([0, 0, 0], [100, 0, 0]) - 2) < 1e-6


# --- matrices ------------------------------------------------------------------------

def test_cross_cost_matches_scalar_loop():
    rng = np.random.default_rng(0)
    Fp, Fq = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    C = build_cross_cost(Fp, Fq)
    for i, j in itertools.product(range(4), range(5)):
        assert C[i, j] == pytest.approx(feature_distance(Fp[i], Fq[j]), abs=1e-12)
    assert C.min() >= 0 and C.max() <= 2


def test_cross_cost_zero_diagonal_on_identical_sets():
    F = np.random.default_rng(1).normal(size=(6, 4))
    assert np.all(np.diag(build_cross_cost(F, F)) == 0.0)


def test_cross_cost_errors():
    with pytest.raises(ShapeError):
        build_cross_cost(np.ones((2, 3)), np.ones((2, 4)))
    with pytest.raises(DegenerateFeatureError):
        build_cross_cost(np.array([[1.0, 0], [0, 0]]), np.ones((2, 2)))
    with pytest.raises(ValueError):
        build_cross_cost(np.array([[np.inf, 0]]), np.ones((1, 2)))


def test_structure_cost_matches_scalar_loop():
    rng = np.random.default_rng(2)
    pts, F = rng.normal(size=(6, 3)), rng.normal(size=(6, 5))
    C = build_structure_cost(pts, F, 0.1)
    for i, k in itertools.product(range(6), repeat=2):
        expect = 0.1 * euclid_structure_distance(pts[i], pts[k]) + 0.9 * feature_distance(F[i], F[k])
        assert C[i, k] == pytest.approx(expect, abs=1e-12)


def test_structure_cost_lambda_endpoints():
    rng = np.random.default_rng(3)
    pts, F = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    D = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.testing.assert_allclose(build_structure_cost(pts, F, 1.0), 2 * np.tanh(D), atol=1e-15)
    np.testing.assert_allclose(build_structure_cost(pts, F, 0.0), build_cross_cost(F, F), atol=1e-15)
    with pytest.raises(ValueError):
        build_structure_cost(pts, F, 1.5)
    with pytest.raises(ShapeError):
        build_structure_cost(pts, F[:4], 0.1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.floats(0, 1))
def test_structure_cost_invariants(seed, n, lam):
    rng = np.random.default_rng(seed)
    pts, F = rng.normal(size=(n, 3)), rng.normal(size=(n, 4))
    C = build_structure_cost(pts, F, lam)
    assert np.array_equal(C, C.T)
    assert np.all(np.diag(C) == 0)
    assert C.min() >= 0 and C.max() <= 2
    tf = RigidTransform(random_rotation(rng), rng.normal(size=3))
    np.testing.assert_allclose(build_structure_cost(tf.apply(pts), F, lam), C, atol=1e-12)


def test_cost_bundle_shape_check():
    with pytest.raises(ShapeError):
        CostBundle(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)))
    b = CostBundle(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((3, 3)))
    assert b.shape == (2, 3)


# --- Gromov-Wasserstein term ------------------------------------------------------------

def test_gw_term_small_examples():
    assert gw_term(np.zeros((1, 1)), np.zeros((1, 1)), np.ones((1, 1))).tolist() == [[0.0]]
    rng = np.random.default_rng(4)
    assert np.all(gw_term(sym(rng, 3), sym(rng, 4), np.zeros((3, 4))) == 0)


@pytest.mark.parametrize("seed", range(10))
def test_gw_term_matches_quadruple_sum(seed):
    rng = np.random.default_rng(seed)
    n, m = rng.integers(1, 7, size=2)
    Cp, Cq, G = sym(rng, n), sym(rng, m), rng.uniform(size=(n, m))
    H = gw_term(Cp, Cq, G)
    ref = gw_term_loops(Cp, Cq, G)
    assert np.max(np.abs(H - ref)) <= 1e-10 * np.max(np.abs(ref))
    obj = gw_objective(Cp, Cq, G)
    assert obj == pytest.approx(gw_objective_loops(Cp, Cq, G), rel=1e-10)
    assert obj >= 0


def test_gw_term_non_symmetric_structure_uses_column_index():
    # the definition reads C^p[i, k] and C^q[j, l]; check against loops without symmetry
    rng = np.random.default_rng(11)
    Cp, Cq, G = rng.normal(size=(3, 3)), rng.normal(size=(4, 4)), rng.uniform(size=(3, 4))
    np.testing.assert_allclose(gw_term(Cp, Cq, G), gw_term_loops(Cp, Cq, G), rtol=1e-12)


def test_gw_term_batched_equals_loop_over_batch():
    rng = np.random.default_rng(12)
    Cp = np.stack([sym(rng, 4) for _ in range(3)])
    Cq = np.stack([sym(rng, 5) for _ in range(3)])
    G = rng.uniform(size=(3, 4, 5))
    H = gw_term(Cp, Cq, G)
    for b in range(3):
        np.testing.assert_allclose(H[b], gw_term(Cp[b], Cq[b], G[b]), rtol=1e-13)


def test_gw_objective_zero_for_self_match():
    rng = np.random.default_rng(13)
    pts, F = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    C = build_structure_cost(pts, F, 0.1)
    assert gw_objective(C, C, np.eye(6) / 6) == pytest.approx(0.0, abs=1e-14)
    assert gw_objective(C, C, np.zeros((6, 6))) == 0.0


def test_gw_shape_error():
    with pytest.raises(ShapeError):
        gw_term(np.zeros((2, 2)), np.zeros((3, 3)), np.zeros((3, 3)))
