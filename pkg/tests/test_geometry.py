import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slamkit.errors import DegenerateConfiguration, DegenerateProjection, UnitMismatch
from slamkit.geometry import (
    Homography,
    Point2,
    PoseSE3,
    Unit,
    apply_homography,
    compose,
    exp_se3,
    inverse,
    log_se3,
    pose_distance,
    quat_to_matrix,
    se3_left_jacobian,
    se3_left_jacobian_inv,
)

from conftest import random_homography, random_pose

finite = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False)


def test_identity_homography_fixed_point():
    p = apply_homography(Homography.identity(), Point2(3.5, 2.0))
    assert (p.u, p.v) == (3.5, 2.0)


def test_scaling_homography():
    H = Homography.from_params([2, 0, 0, 0, 2, 0, 0, 0, 1])
    p = apply_homography(H, Point2(1, 1))
    assert (p.u, p.v) == (2.0, 2.0)


def test_homography_matches_matrix_multiply_oracle(rng):
    for _ in range(200):
        M = random_homography(rng)
        H = Homography(M)
        p = rng.uniform(-300, 300, 2)
        x = M @ np.array([p[0], p[1], 1.0])
        expected = x[:2] / x[2]
        got = apply_homography(H, Point2(*p))
        assert got.u == pytest.approx(expected[0], abs=1e-12, rel=1e-12)
        assert got.v == pytest.approx(expected[1], abs=1e-12, rel=1e-12)


def test_homography_normalized_h9():
    H = Homography(np.diag([4.0, 4.0, 2.0]))
    assert H.matrix[2, 2] == 1.0
    assert H.params[0] == 2.0


def test_homography_rejects_vanishing_h9():
    with pytest.raises(DegenerateConfiguration):
        Homography(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0.0]]))


def test_homography_rejects_singular():
    with pytest.raises(DegenerateConfiguration):
        Homography(np.array([[1, 2, 0], [2, 4, 0], [0, 0, 1.0]]))


def test_degenerate_projection():
    H = Homography(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 1.0]]))
    with pytest.raises(DegenerateProjection):
        apply_homography(H, Point2(-1.0, 5.0))


def test_point_unit_mismatch():
    with pytest.raises(UnitMismatch):
        Point2(0, 0, Unit.PIXEL).distance(Point2(1, 1, Unit.NORMALIZED))


@given(finite, finite)
def test_identity_homography_property(u, v):
    p = apply_homography(Homography.identity(), Point2(u, v))
    assert (p.u, p.v) == (u, v)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_homography_inverse_round_trip(seed):
    rng = np.random.default_rng(seed)
    H = Homography(random_homography(rng))
    p = Point2(*rng.uniform(-200, 200, 2))
    q = apply_homography(H.inverse(), apply_homography(H, p))
    assert math.hypot(q.u - p.u, q.v - p.v) < 1e-9


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0), st.booleans())
def test_homography_scale_invariance(seed, c, negate):
    rng = np.random.default_rng(seed)
    M = random_homography(rng)
    c = -c if negate else c
    a, b = Homography(M), Homography(c * M)
    pts = rng.uniform(-100, 100, (20, 2))
    np.testing.assert_allclose(a.apply(pts), b.apply(pts), rtol=1e-12, atol=1e-9)


def test_compose_with_inverse_is_identity(rng):
    for _ in range(100):
        T = random_pose(rng)
        assert pose_distance(compose(T, inverse(T)), PoseSE3.identity()) < 1e-12
        assert pose_distance(compose(inverse(T), T), PoseSE3.identity()) < 1e-12


def test_exp_of_zero_is_identity():
    assert exp_se3(np.zeros(6)) == PoseSE3.identity()


def test_exp_log_round_trip_1000(rng):
    worst = 0.0
    for _ in range(1000):
        T = random_pose(rng)
        worst = max(worst, pose_distance(exp_se3(log_se3(T)), T))
    assert worst < 1e-9


def test_log_exp_near_pi(rng):
    for angle in (np.pi - 1e-3, np.pi - 1e-2, 1e-9, 1e-4, 0.049, 0.051):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        T = PoseSE3([np.cos(angle / 2), *(np.sin(angle / 2) * axis)], rng.normal(size=3))
        assert pose_distance(exp_se3(log_se3(T)), T) < 1e-9


def test_compose_matches_matrix_product(rng):
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        np.testing.assert_allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)


def test_canonical_sign_and_norm(rng):
    p = PoseSE3([-0.5, -0.5, -0.5, -0.5], [0, 0, 0])
    assert p.rotation[0] >= 0
    for _ in range(50):
        q = random_pose(rng).rotation
        assert abs(np.linalg.norm(q) - 1) < 1e-9 and q[0] >= 0


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_group_axioms(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    assert pose_distance(compose(compose(a, b), c), compose(a, compose(b, c))) < 1e-9
    assert pose_distance(inverse(inverse(a)), a) < 1e-12


def test_rotation_matrix_orthonormal(rng):
    for _ in range(20):
        R = quat_to_matrix(random_pose(rng).rotation)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_left_jacobian_inverse(rng):
    for scale in (1e-6, 1e-2, 0.04, 0.2, 1.5, 3.0):
        xi = rng.normal(size=6)
        xi[3:] *= scale / np.linalg.norm(xi[3:])
        np.testing.assert_allclose(se3_left_jacobian(xi) @ se3_left_jacobian_inv(xi), np.eye(6), atol=1e-10)


def test_left_jacobian_finite_difference(rng):
    # exp(xi + d) ~= exp(J_l(xi) d) exp(xi)
    h = 1e-6
    for scale in (0.03, 0.5, 2.0):
        xi = rng.normal(size=6)
        xi[3:] *= scale / np.linalg.norm(xi[3:])
        T = exp_se3(xi)
        J = np.zeros((6, 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            plus = log_se3(compose(exp_se3(xi + d), inverse(T)))
            minus = log_se3(compose(exp_se3(xi - d), inverse(T)))
            J[:, k] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(J, se3_left_jacobian(xi), atol=1e-7)
