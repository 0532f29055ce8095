import json
import math

import numpy as np
import pytest

from dicp_components.dicp_grad import central_difference
from dicp_components.errors import DataError, DimensionMismatchError, SingularityError
from dicp_components.se_geometry import (
    Pose,
    Twist,
    compose,
    exp_map,
    inverse,
    log_map,
    planar_pose,
    pose_error,
    transform_points,
)


def test_exp_of_zero_twist_is_identity():
    assert exp_map(Twist.zero(2)).allclose(Pose.identity(2), atol=0.0)
    assert exp_map(Twist.zero(3)).allclose(Pose.identity(3), atol=0.0)


def test_exp_pure_rotation():
    pose = exp_map(Twist([0.0, 0.0, math.pi / 2]))
    np.testing.assert_allclose(pose.rotation, [[0.0, -1.0], [1.0, 0.0]], atol=1e-15)
    np.testing.assert_allclose(pose.translation, [0.0, 0.0], atol=0.0)


def test_exp_matches_closed_form_left_jacobian():
    theta = math.pi
    rho = np.array([1.0, 0.0])
    v = np.array(
        [
            [math.sin(theta) / theta, -(1.0 - math.cos(theta)) / theta],
            [(1.0 - math.cos(theta)) / theta, math.sin(theta) / theta],
        ]
    )
    pose = exp_map(Twist([1.0, 0.0, theta]))
    np.testing.assert_allclose(pose.translation, v @ rho, atol=1e-12)


def test_log_identity_and_pure_translation():
    np.testing.assert_array_equal(log_map(Pose.identity(2)).vector, np.zeros(3))
    twist = log_map(Pose(np.eye(2), [0.4, -1.5]))
    np.testing.assert_allclose(twist.vector, [0.4, -1.5, 0.0], atol=1e-15)


def test_log_exp_roundtrip_example():
    xi = np.array([0.3, -0.2, 0.7])
    np.testing.assert_allclose(log_map(exp_map(Twist(xi))).vector, xi, atol=1e-9)


def test_log_rejects_half_turn():
    with pytest.raises(SingularityError):
        log_map(planar_pose(1.0, 0.0, math.pi))


def random_twists(rng, count, dim):
    if dim == 2:
        translation = rng.uniform(-5.0, 5.0, (count, 2))
        angle = rng.uniform(-math.pi + 0.1, math.pi - 0.1, (count, 1))
        return np.hstack([translation, angle])
    translation = rng.uniform(-5.0, 5.0, (count, 3))
    axis = rng.normal(size=(count, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0.0, math.pi - 0.1, (count, 1))
    return np.hstack([translation, axis * angle])


@pytest.mark.parametrize("dim", [2, 3])
def test_exp_log_roundtrip_on_random_twists(rng, dim):
    for xi in random_twists(rng, 5000, dim):
        recovered = log_map(exp_map(Twist(xi))).vector
        assert np.max(np.abs(recovered - xi)) < 1e-9


@pytest.mark.parametrize("dim", [2, 3])
def test_exp_log_small_angle_branch(dim):
    xi = np.zeros(3 if dim == 2 else 6)
    xi[0] = 0.5
    xi[-1] = 1e-9
    np.testing.assert_allclose(log_map(exp_map(Twist(xi))).vector, xi, atol=1e-15)


def test_compose_and_inverse():
    a = planar_pose(1.0, 2.0, 0.3)
    assert compose(Pose.identity(2), a).allclose(a)
    assert inverse(inverse(a)).allclose(a)
    assert compose(a, inverse(a)).allclose(Pose.identity(2))

    thirty = planar_pose(0.0, 0.0, math.radians(30.0))
    sixty = planar_pose(0.0, 0.0, math.radians(60.0))
    assert compose(thirty, sixty).allclose(planar_pose(0.0, 0.0, math.pi / 2))


def test_compose_rejects_mixed_dimensions():
    with pytest.raises(DimensionMismatchError):
        compose(Pose.identity(2), Pose.identity(3))


def test_transform_points_examples(rng):
    points = rng.normal(size=(5, 2))
    np.testing.assert_array_equal(transform_points(Pose.identity(2), points), points)
    quarter = planar_pose(0.0, 0.0, math.pi / 2)
    np.testing.assert_allclose(
        transform_points(quarter, [[1.0, 0.0]]), [[0.0, 1.0]], atol=1e-15
    )
    with pytest.raises(DimensionMismatchError):
        transform_points(quarter, np.zeros((3, 3)))


@pytest.mark.parametrize("dim", [2, 3])
def test_transform_points_is_an_isometry(rng, dim):
    pose = exp_map(Twist(random_twists(rng, 1, dim)[0]))
    cloud = rng.uniform(-10.0, 10.0, (50, dim))
    moved = transform_points(pose, cloud)

    def pairwise(p):
        return np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)

    assert np.max(np.abs(pairwise(moved) - pairwise(cloud))) < 1e-9


def test_pose_error_examples():
    truth = planar_pose(3.0, -1.0, 0.4)
    np.testing.assert_array_equal(pose_error(truth, truth).vector, np.zeros(3))

    shifted = compose(planar_pose(0.1, 0.0, 0.0), truth)
    np.testing.assert_allclose(
        pose_error(shifted, truth).vector, [0.1, 0.0, 0.0], atol=1e-12
    )

    xi = np.array([0.05, -0.02, 0.01])
    estimate = compose(exp_map(Twist(xi)), truth)
    np.testing.assert_allclose(pose_error(estimate, truth).vector, xi, atol=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
def test_log_jacobian_at_identity_is_identity(dim):
    size = 3 if dim == 2 else 6

    def roundtrip(x, k):
        return log_map(exp_map(Twist(x))).vector[k]

    jacobian = np.vstack(
        [
            central_difference(lambda x, k=k: roundtrip(x, k), np.zeros(size), 1e-6)
            for k in range(size)
        ]
    )
    np.testing.assert_allclose(jacobian, np.eye(size), atol=1e-6)


def test_pose_validation():
    with pytest.raises(DataError):
        Pose([[1.0, 0.1], [0.0, 1.0]], [0.0, 0.0])
    with pytest.raises(DataError):
        Pose([[1.0, 0.0], [0.0, -1.0]], [0.0, 0.0])
    with pytest.raises(DimensionMismatchError):
        Twist([1.0, 2.0])


def test_pose_json_roundtrip_is_exact():
    pose = exp_map(Twist([0.123456789, -9.87654321, 0.3141592653589793]))
    document = json.loads(json.dumps(pose.to_dict()))
    restored = Pose.from_dict(document)
    np.testing.assert_array_equal(restored.rotation, pose.rotation)
    np.testing.assert_array_equal(restored.translation, pose.translation)
    assert document["dim"] == 2
