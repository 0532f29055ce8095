import json

import numpy as np
import pytest
import torch

from dicp_components.dicp_core import (
    IcpConfig,
    NnMode,
    RobustLoss,
    UpdateRule,
    trim_gate,
    trim_gate_tensor,
)
from dicp_components.dicp_grad import (
    GradRequest,
    IcpPoseLoss,
    central_difference,
    check_gradient,
    solve_with_grad,
)
from dicp_components.errors import ConfigError
from dicp_components.mask_weighting import WeightMask, sample_weights
from dicp_components.pointcloud import PointCloud, estimate_normals
from dicp_components.se_geometry import Pose, planar_pose


def smooth_cfg(**overrides) -> IcpConfig:
    settings = {
        "robust_loss": RobustLoss("cauchy", 1.0),
        "trim_distance": 5.0,
        "update_rule": UpdateRule("gradient_descent", 0.005),
        "differentiable": True,
    }
    settings.update(overrides)
    return IcpConfig(**settings)


def test_perfect_data_has_zero_gradient(rng):
    cloud = PointCloud(rng.uniform(-3.0, 3.0, (40, 2)))
    req = GradRequest(loss=IcpPoseLoss(Pose.identity(2)), unroll_iterations=5)
    result, grad = solve_with_grad(cloud, cloud, Pose.identity(2), smooth_cfg(), req)
    assert grad.loss_value == 0.0
    assert np.max(np.abs(grad.gradient)) < 1e-8
    assert result.pose.allclose(Pose.identity(2))


@pytest.mark.parametrize("nn_grad_mode", ["locally_constant", "soft"])
@pytest.mark.parametrize("error_model", ["point_to_point", "point_to_plane"])
@pytest.mark.parametrize("robust", ["none", "cauchy", "pseudo_huber"])
def test_prior_weight_gradient_matches_finite_differences(
    small_scene, nn_grad_mode, error_model, robust
):
    source, target, truth = small_scene
    if error_model == "point_to_plane":
        target = estimate_normals(target, k=6)
    cfg = smooth_cfg(error_model=error_model, robust_loss=RobustLoss(robust, 1.0))
    req = GradRequest(
        loss=IcpPoseLoss(truth), nn_grad_mode=nn_grad_mode, unroll_iterations=3
    )
    report = check_gradient(source, target, Pose.identity(2), cfg, req, h=1e-6)
    assert len(report.indices) == source.size
    assert report.max_relative_error < 1e-4


def test_source_point_gradient_matches_finite_differences(small_scene):
    source, target, truth = small_scene
    req = GradRequest(loss=IcpPoseLoss(truth), wrt="source_points", unroll_iterations=3)
    report = check_gradient(source, target, Pose.identity(2), smooth_cfg(), req)
    assert len(report.indices) == source.size * 2
    assert report.max_relative_error < 1e-4


def test_upweighting_an_outlier_raises_the_loss(rng):
    target = PointCloud(rng.uniform(-3.0, 3.0, (40, 2)))
    outlier = [[0.5, 6.0]]
    source = PointCloud(
        np.vstack([target.points[:20], outlier]),
        prior_weights=np.r_[np.ones(20), 0.5],
    )
    cfg = smooth_cfg(trim_distance=None, robust_loss=RobustLoss("none"))
    req = GradRequest(loss=IcpPoseLoss(Pose.identity(2)), unroll_iterations=3)
    _, grad = solve_with_grad(source, target, Pose.identity(2), cfg, req)
    assert grad.gradient[20] > 0.0

    heavier = source.with_prior_weights(np.r_[np.ones(20), 0.6])
    _, heavier_grad = solve_with_grad(heavier, target, Pose.identity(2), cfg, req)
    assert heavier_grad.loss_value > grad.loss_value


def test_mask_gradient_is_the_chain_rule_of_weight_gradient(small_scene, rng):
    source, target, truth = small_scene
    mask = WeightMask(rng.uniform(0.2, 1.0, (32, 32)), 0.5)
    weights, jacobian = sample_weights(mask, source.points, return_jacobian=True)
    weighted = source.with_prior_weights(weights)
    loss = IcpPoseLoss(truth)

    _, by_weight = solve_with_grad(
        weighted,
        target,
        Pose.identity(2),
        smooth_cfg(),
        GradRequest(loss, unroll_iterations=3),
    )
    _, by_pixel = solve_with_grad(
        source,
        target,
        Pose.identity(2),
        smooth_cfg(),
        GradRequest(loss, wrt="mask_pixels", mask=mask, unroll_iterations=3),
    )
    assert by_pixel.gradient.shape == (32, 32)
    expected = (jacobian.T @ by_weight.gradient).reshape(32, 32)
    np.testing.assert_allclose(by_pixel.gradient, expected, rtol=0.0, atol=1e-9)
    assert by_pixel.loss_value == pytest.approx(by_weight.loss_value, abs=1e-15)


def test_mask_gradient_matches_finite_differences(small_scene, rng):
    source, target, truth = small_scene
    mask = WeightMask(rng.uniform(0.2, 1.0, (32, 32)), 0.5)
    _, jacobian = sample_weights(mask, source.points, return_jacobian=True)
    touched = np.flatnonzero(np.asarray(jacobian.sum(axis=0)).ravel() > 0.1)[:6]
    req = GradRequest(
        IcpPoseLoss(truth), wrt="mask_pixels", mask=mask, unroll_iterations=3
    )
    report = check_gradient(
        source, target, Pose.identity(2), smooth_cfg(), req, entries=touched
    )
    assert report.indices == [int(k) for k in touched]
    assert report.max_relative_error < 1e-4


def test_soft_mode_at_tiny_temperature_equals_locally_constant():
    xs, ys = np.meshgrid(np.arange(5.0), np.arange(5.0))
    target = PointCloud(np.column_stack([xs.ravel(), ys.ravel()]))
    rng = np.random.default_rng(11)
    picked = target.points[rng.choice(25, 12, replace=False)]
    source = PointCloud(
        picked + rng.uniform(-0.05, 0.05, (12, 2)),
        prior_weights=rng.uniform(0.5, 1.0, 12),
    )
    cfg = smooth_cfg(trim_distance=None, nn_mode=NnMode("soft_min", 1e-6))
    loss = IcpPoseLoss(planar_pose(0.02, -0.01, 0.01))

    _, hard = solve_with_grad(
        source, target, Pose.identity(2), cfg, GradRequest(loss, unroll_iterations=3)
    )
    _, soft = solve_with_grad(
        source,
        target,
        Pose.identity(2),
        cfg,
        GradRequest(loss, nn_grad_mode="soft", unroll_iterations=3),
    )
    np.testing.assert_allclose(soft.gradient, hard.gradient, rtol=1e-5, atol=1e-12)


def test_single_point_report_has_one_entry():
    target = PointCloud([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
    source = PointCloud([[0.2, 0.1]])
    req = GradRequest(IcpPoseLoss(Pose.identity(2)), unroll_iterations=1)
    cfg = smooth_cfg(trim_distance=None)
    report = check_gradient(source, target, Pose.identity(2), cfg, req)
    assert report.indices == [0]

    document = json.loads(json.dumps(report.to_dict()))
    assert set(document["entries"][0]) == {"index", "g_ad", "g_fd", "relative_error"}
    assert document["max_relative_error"] == report.max_relative_error


def test_trim_gate_derivative_at_the_threshold():
    cfg = IcpConfig(trim_distance=5.0, trim_steepness=10.0, differentiable=True)
    distance = torch.tensor(5.0, dtype=torch.float64, requires_grad=True)
    (derivative,) = torch.autograd.grad(trim_gate_tensor(distance, cfg), distance)
    assert float(derivative) == pytest.approx(-5.0, abs=1e-12)

    numeric = central_difference(lambda d: trim_gate(float(d[0]), cfg), [5.0], 1e-6)
    assert numeric[0] == pytest.approx(-5.0, abs=1e-6)


def test_central_difference_of_selected_entries():
    x = np.array([1.0, 2.0, 3.0])
    calls = []

    def quadratic(v):
        calls.append(v.copy())
        return float(np.sum(v**2))

    full = central_difference(quadratic, x, 1e-4)
    np.testing.assert_allclose(full, 2.0 * x, rtol=1e-8)
    assert len(calls) == 6

    calls.clear()
    picked = central_difference(quadratic, x, 1e-4, entries=[2])
    assert picked[2] == pytest.approx(6.0, rel=1e-8)
    assert picked[0] == picked[1] == 0.0
    assert len(calls) == 2
    np.testing.assert_array_equal(x, [1.0, 2.0, 3.0])


def test_request_validation():
    loss = IcpPoseLoss(Pose.identity(2))
    with pytest.raises(ConfigError):
        GradRequest(loss, unroll_iterations=65)
    with pytest.raises(ConfigError):
        GradRequest(loss, unroll_iterations=0)
    with pytest.raises(ConfigError):
        GradRequest(loss, wrt="target_points")
    with pytest.raises(ConfigError):
        GradRequest(loss, wrt="mask_pixels")
    with pytest.raises(ConfigError):
        GradRequest(loss, nn_grad_mode="straight_through")
    with pytest.raises(ConfigError):
        central_difference(lambda x: 0.0, [1.0], 0.0)


def test_solver_settings_must_be_differentiable(small_scene):
    source, target, truth = small_scene
    req = GradRequest(IcpPoseLoss(truth), unroll_iterations=2)
    with pytest.raises(ConfigError):
        solve_with_grad(source, target, Pose.identity(2), IcpConfig(), req)
    gauss_newton = smooth_cfg(update_rule=UpdateRule("gauss_newton"))
    with pytest.raises(ConfigError):
        solve_with_grad(source, target, Pose.identity(2), gauss_newton, req)


def test_loss_must_be_scalar(small_scene):
    source, target, _ = small_scene
    req = GradRequest(lambda pose: pose[:2, 2], unroll_iterations=2)
    with pytest.raises(ConfigError):
        solve_with_grad(source, target, Pose.identity(2), smooth_cfg(), req)
