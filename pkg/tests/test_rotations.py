import numpy as np
import pytest
from conftest import random_rotations
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import rotation_oracle

from headcond import rotations as rot

finite = st.floats(-3.0, 3.0, allow_nan=False)
axis_angles = st.tuples(finite, finite, finite).map(np.array)


def test_rodrigues_matches_quaternion_oracle():
    r = random_rotations(np.random.default_rng(0), 200)
    got = rot.axis_angle_to_matrix(r)
    want = np.stack([rotation_oracle(v) for v in r])
    assert np.max(np.abs(got - want)) < 1e-12


def test_zero_rotation_is_exact_identity():
    assert np.array_equal(rot.axis_angle_to_matrix(np.zeros(3)), np.eye(3))


def test_tiny_angles_stay_accurate():
    r = np.array([1e-10, -2e-10, 3e-11])
    assert np.max(np.abs(rot.axis_angle_to_matrix(r) - rotation_oracle(r))) < 1e-15


@given(axis_angles)
@settings(max_examples=200, deadline=None)
def test_matrix_is_special_orthogonal(r):
    R = rot.axis_angle_to_matrix(r)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-12)


def test_axis_angle_round_trip_below_pi():
    r = random_rotations(np.random.default_rng(1), 500, max_angle=np.pi - 1e-3)
    back = rot.matrix_to_axis_angle(rot.axis_angle_to_matrix(r))
    assert np.max(np.abs(back - r)) < 1e-10


def test_near_pi_round_trip_matches_rotation():
    rng = np.random.default_rng(2)
    r = random_rotations(rng, 100, max_angle=1.0)
    r = r / np.linalg.norm(r, axis=1, keepdims=True) * (np.pi - rng.uniform(0, 1e-7, (100, 1)))
    R = rot.axis_angle_to_matrix(r)
    assert np.max(np.abs(rot.axis_angle_to_matrix(rot.matrix_to_axis_angle(R)) - R)) < 1e-9


def test_quaternion_is_unit_and_rotates_like_matrix():
    from oracles import quat_rotate

    r = random_rotations(np.random.default_rng(3), 100)
    R = rot.axis_angle_to_matrix(r)
    q = rot.matrix_to_quaternion(R)
    assert np.allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-12)
    v = np.array([0.3, -1.2, 0.7])
    for qi, Ri in zip(q, R):
        assert np.allclose(quat_rotate(qi, v), Ri @ v, atol=1e-12)


def test_rot6d_round_trip():
    R = rot.axis_angle_to_matrix(random_rotations(np.random.default_rng(4), 1000))
    assert np.max(np.abs(rot.rot6d_to_matrix(rot.rot6d_from_matrix(R)) - R)) < 1e-12


def test_rot6d_gram_schmidt_of_perturbed_input():
    v = np.array([2.0, 0.0, 0.0, 0.5, 3.0, 0.0])
    assert np.allclose(rot.rot6d_to_matrix(v), np.eye(3), atol=1e-15)


def test_rot6d_rejects_degenerate_columns():
    with pytest.raises(ValueError):
        rot.rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))


def test_geodesic_distance_equals_relative_angle():
    rng = np.random.default_rng(5)
    a = random_rotations(rng, 50, max_angle=1.0)
    axis = rng.standard_normal((50, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    ang = rng.uniform(0, 2.0, 50)
    R1 = rot.axis_angle_to_matrix(a)
    R2 = rot.axis_angle_to_matrix(axis * ang[:, None]) @ R1
    assert np.allclose(rot.geodesic_distance(R1, R2), ang, atol=1e-10)


def test_compose_matches_matrix_product():
    rng = np.random.default_rng(6)
    a, b = random_rotations(rng, 50, 2.0), random_rotations(rng, 50, 2.0)
    got = rot.axis_angle_to_matrix(rot.compose_axis_angle(a, b))
    want = rot.axis_angle_to_matrix(a) @ rot.axis_angle_to_matrix(b)
    assert np.max(np.abs(got - want)) < 1e-12


def test_slerp_endpoints_and_midpoint():
    rng = np.random.default_rng(7)
    R0 = rot.axis_angle_to_matrix(random_rotations(rng, 20, 1.0))
    R1 = rot.axis_angle_to_matrix(random_rotations(rng, 20, 1.0))
    assert np.allclose(rot.slerp_matrix(R0, R1, np.zeros(20)), R0, atol=1e-12)
    assert np.allclose(rot.slerp_matrix(R0, R1, np.ones(20)), R1, atol=1e-12)
    mid = rot.slerp_matrix(R0, R1, np.full(20, 0.5))
    assert np.allclose(rot.geodesic_distance(R0, mid), rot.geodesic_distance(mid, R1), atol=1e-10)
