import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from taxpose.geometry import (
    RigidTransform,
    apply,
    as_cloud,
    axis_angle,
    center,
    centroid,
    compose,
    diameter,
    invert,
    is_rotation,
    quaternion_to_matrix,
    random_rotation,
    random_transform,
    rot_x,
    rot_y,
    rot_z,
    rotation_angle_between,
    rotation_geodesic_error,
    translation_error,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def test_as_cloud_rejects_bad_shapes():
    with pytest.raises(ValueError):
        as_cloud(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        as_cloud(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        as_cloud([[0.0, np.nan, 1.0]])


def test_transform_validation_and_row_round_trip(rng):
    t = random_transform(rng)
    row = t.to_row()
    assert row.shape == (12,)
    assert np.array_equal(RigidTransform.from_row(row).to_row(), row)
    assert np.array_equal(row[:9], t.rotation.reshape(9))
    with pytest.raises(ValueError):
        RigidTransform(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform.from_row(np.zeros(11))


def test_apply_matches_homogeneous_matrix(rng):
    t = random_transform(rng)
    p = rng.standard_normal((10, 3))
    homo = np.c_[p, np.ones(10)] @ t.matrix().T
    assert np.allclose(apply(t, p), homo[:, :3], atol=1e-14)
    assert not apply(t, p).flags.writeable


@settings(max_examples=50, deadline=None)
@given(seeds, seeds)
def test_compose_matches_matrix_product(s1, s2):
    a, b = random_transform(s1), random_transform(s2)
    assert np.allclose(compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
    assert np.allclose((a @ b).matrix(), compose(a, b).matrix())


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_inverse_round_trip(s):
    t = random_transform(s, translation_scale=5.0)
    assert compose(t, invert(t)).allclose(RigidTransform.identity(), atol=1e-12)
    assert compose(invert(t), t).allclose(RigidTransform.identity(), atol=1e-12)


def test_elementary_rotations_match_scipy():
    for theta in (0.3, -1.2, np.pi):
        assert np.allclose(rot_x(theta), Rotation.from_euler("x", theta).as_matrix(), atol=1e-15)
        assert np.allclose(rot_y(theta), Rotation.from_euler("y", theta).as_matrix(), atol=1e-15)
        assert np.allclose(rot_z(theta), Rotation.from_euler("z", theta).as_matrix(), atol=1e-15)


def test_axis_angle_and_quaternion_match_scipy(rng):
    for _ in range(20):
        axis = rng.standard_normal(3)
        theta = rng.uniform(-np.pi, np.pi)
        ref = Rotation.from_rotvec(axis / np.linalg.norm(axis) * theta).as_matrix()
        assert np.allclose(axis_angle(axis, theta), ref, atol=1e-14)
        q = rng.standard_normal(4)  # (w, x, y, z)
        ref = Rotation.from_quat(np.r_[q[1:], q[0]]).as_matrix()
        assert np.allclose(quaternion_to_matrix(q), ref, atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_random_rotation_is_proper(s):
    assert is_rotation(random_rotation(s))


def test_random_transform_is_deterministic():
    assert random_transform(7).allclose(random_transform(7), atol=0)
    assert not random_transform(7).allclose(random_transform(8))


def test_yaw_only_rotates_about_z(rng):
    t = random_transform(rng, yaw_only=True)
    assert np.allclose(t.rotation[2], [0, 0, 1], atol=1e-15)


def test_geodesic_error_reference_cases():
    # halved geodesic: identity 0, a quarter turn pi/4, a half turn pi/2
    assert rotation_geodesic_error(np.eye(3), np.eye(3)) == pytest.approx(0.0, abs=1e-12)
    assert rotation_geodesic_error(rot_z(np.pi / 2), np.eye(3)) == pytest.approx(np.pi / 4, abs=1e-12)
    assert rotation_geodesic_error(rot_x(np.pi), np.eye(3)) == pytest.approx(np.pi / 2, abs=1e-12)


def test_geodesic_error_matches_scipy_magnitude(rng):
    for _ in range(50):
        a, b = random_rotation(rng), random_rotation(rng)
        ref = Rotation.from_matrix(a.T @ b).magnitude() / 2
        assert rotation_geodesic_error(a, b) == pytest.approx(ref, abs=1e-7)
        assert rotation_angle_between(a, b) == pytest.approx(2 * ref, abs=1e-12)


def test_rotation_angle_between_resolves_tiny_angles():
    assert rotation_angle_between(rot_z(1e-12), np.eye(3)) == pytest.approx(1e-12, rel=1e-6)


def test_translation_error():
    assert translation_error([1, 2, 3], [1, 2, 0]) == 3.0


def test_center_is_exactly_translation_normalizing():
    # dyadic coordinates and shifts keep every operation exact
    p = np.array([[0.5, 0.25, -1.0], [1.5, -0.75, 2.0], [-2.0, 0.5, 0.0], [0.0, 0.0, 1.0]])
    c1, m1 = center(p)
    c2, m2 = center(p + np.array([4.0, -8.0, 0.125]))
    assert np.array_equal(c1, c2)
    assert np.array_equal(m2 - m1, [4.0, -8.0, 0.125])
    assert np.array_equal(centroid(p), m1)


def test_diameter_matches_brute_force(rng):
    p = rng.standard_normal((30, 3))
    ref = max(np.linalg.norm(a - b) for a in p for b in p)
    assert diameter(p) == pytest.approx(ref, rel=1e-14)
