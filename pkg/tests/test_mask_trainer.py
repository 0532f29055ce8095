import math

import numpy as np
import pandas as pd
import pytest
from conftest import room_spec
from scipy.special import expit

from dicp_components import mask_trainer
from dicp_components.dicp_core import IcpConfig
from dicp_components.dicp_grad import GradRequest, IcpPoseLoss, solve_with_grad
from dicp_components.errors import ConfigError, SingularityError
from dicp_components.mask_weighting import (
    LossWeights,
    MaskGeometry,
    WeightMask,
    sample_weights,
)
from dicp_components.mask_trainer import (
    MaskGradient,
    RunRecord,
    TrainConfig,
    TrainSample,
    compute_mask_gradient,
    evaluate_mask,
    mask_from_logits,
    noise_suppression,
    polyak_step,
    selection_score,
    summarize_runs,
    train_mask,
    training_problem,
    validate_mask,
)
from dicp_components.radar_extract import DetectorConfig
from dicp_components.scene import (
    STRUCTURE,
    VEHICLE,
    SceneSpec,
    VehicleCluster,
    WallSpec,
    generate_scene,
    standard_scene_spec,
    standard_suite,
)
from dicp_components.se_geometry import Pose

GEOMETRY = MaskGeometry(32, 0.5)


def small_cfg(**overrides) -> TrainConfig:
    settings = {"geometry": GEOMETRY, "epochs": 5}
    settings.update(overrides)
    return TrainConfig(**settings)


@pytest.fixture
def perfect_sample():
    return TrainSample.from_scene(generate_scene(room_spec(gt_twist=(0.5, -0.3, 0.2))))


@pytest.fixture
def noisy_sample():
    return TrainSample.from_scene(generate_scene(room_spec(sensor_noise_sigma=0.05)))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(icp=IcpConfig())
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"icp": {"differentiable": False}})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"batch_size": 4})

    cfg = TrainConfig.from_dict(
        {
            "epochs": 3,
            "geometry": {"width": 32, "pixel_size": 0.5},
            "icp": {"trim_distance": 4.0},
        }
    )
    assert cfg.geometry == GEOMETRY
    assert cfg.icp.differentiable
    assert cfg.icp.trim_distance == 4.0
    assert cfg.map_range == GEOMETRY.half_extent


def test_never_good_sample_keeps_the_initial_mask(noisy_sample):
    cfg = small_cfg(epochs=3, good_error_threshold=1e-12)
    result = train_mask(noisy_sample, cfg, seed=1)
    assert result.all_skipped
    assert all(record.skipped for record in result.trace.records)
    assert not result.logits.any()
    initial = mask_from_logits(np.zeros((32, 32)), 0.5)
    np.testing.assert_array_equal(result.mask.values, initial.values)


def test_mask_gradient_without_bce_is_the_solver_gradient(noisy_sample, rng):
    cfg = small_cfg(loss_weights=LossWeights(gamma=0.0), unroll_iterations=4)
    logits = rng.normal(0.0, 1.0, (32, 32))
    step = compute_mask_gradient(noisy_sample, logits, cfg)

    values = expit(logits)
    request = GradRequest(
        loss=IcpPoseLoss(Pose.identity(2), cfg.loss_weights),
        wrt="mask_pixels",
        unroll_iterations=4,
        mask=WeightMask(values, 0.5),
        sample_points=noisy_sample.source.points,
    )
    source, target, icp = training_problem(noisy_sample, cfg)
    assert icp.trim_distance == pytest.approx(5.0 * noisy_sample.frame_scale)
    _, direct = solve_with_grad(source, target, Pose.identity(2), icp, request)
    np.testing.assert_allclose(
        step.mask_gradient, direct.gradient, rtol=0.0, atol=1e-15
    )
    expected = step.mask_gradient * values * (1.0 - values)
    np.testing.assert_allclose(step.logit_gradient, expected, rtol=1e-15, atol=0.0)
    assert step.l_icp == pytest.approx(direct.loss_value)


@pytest.mark.parametrize("angle", [0.0, 0.7, math.pi / 2, 3.0, 5.5])
def test_rotation_keeps_perfect_alignment(perfect_sample, angle):
    logits = np.full((32, 32), 20.0)
    step = compute_mask_gradient(perfect_sample, logits, small_cfg(), angle)
    assert step.l_icp < 1e-9
    assert step.good


def test_training_is_deterministic(noisy_sample):
    cfg = small_cfg(epochs=4)
    first = train_mask(noisy_sample, cfg, seed=7)
    second = train_mask(noisy_sample, cfg, seed=7)
    assert first.trace.totals == second.trace.totals
    np.testing.assert_array_equal(first.mask.values, second.mask.values)


def test_training_lowers_the_loss_on_perfect_data(perfect_sample):
    result = train_mask(perfect_sample, small_cfg(epochs=30), seed=2)
    assert not result.all_skipped
    totals = result.trace.totals
    assert len(totals) == 30
    assert totals[-1] < totals[0]
    assert result.mask.values.max() == pytest.approx(1.0)


def test_trace_csv(tmp_path, perfect_sample):
    result = train_mask(perfect_sample, small_cfg(epochs=2), seed=0)
    path = result.trace.save_csv(tmp_path / "out" / "trace.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["epoch", "l_icp", "l_bce", "total", "skipped_flag"]
    assert frame["epoch"].tolist() == [0, 1]
    assert set(frame["skipped_flag"]) <= {0, 1}


def test_training_suppresses_a_vehicle_cluster():
    spec = SceneSpec(
        walls=(
            WallSpec((-5.0, -3.0), (5.0, -3.0), 0.5),
            WallSpec((-5.0, -3.0), (-5.0, 5.0), 0.5),
        ),
        vehicle_clusters=(VehicleCluster((3.5, 3.0), (1.0, 1.0), 20),),
        seed=4,
    )
    sample = TrainSample.from_scene(generate_scene(spec))
    result = train_mask(sample, small_cfg(epochs=60), seed=0)
    assert not result.all_skipped
    means = noise_suppression(result.mask, sample)
    assert means[VEHICLE] < means[STRUCTURE]


def test_evaluation_without_perturbation_is_exact(perfect_sample):
    mask = WeightMask.constant(GEOMETRY)
    evaluation = evaluate_mask(mask, [perfect_sample], 0.0, trials=3, seed=1)
    assert len(evaluation.records) == 6
    for mode in ("unweighted", "weighted"):
        metrics = evaluation.metrics[mode]
        assert metrics.runs == 3
        assert metrics.converged_pct == 100.0
        assert metrics.accurate_pct == 100.0
        assert metrics.rmse_long_m == pytest.approx(0.0, abs=1e-9)


def test_validate_mask(perfect_sample):
    evaluation = validate_mask(WeightMask.constant(GEOMETRY), [perfect_sample])
    assert {r.mode for r in evaluation.records} == {"unweighted", "weighted"}
    assert all(r.init_x == 0.0 and r.accurate for r in evaluation.records)


def record(err_long, converged, accurate):
    return RunRecord(
        sample=0,
        trial=0,
        mode="weighted",
        sigma=1.0,
        init_x=0.0,
        init_y=0.0,
        init_heading_deg=0.0,
        err_long_m=err_long,
        err_lat_m=0.0,
        err_head_deg=0.0,
        step_norm=0.0 if converged else 1.0,
        iterations=5,
        converged=converged,
        accurate=accurate,
    )


def test_summarize_runs():
    metrics = summarize_runs(
        [record(0.1, True, False), record(-0.1, True, False)], "weighted"
    )
    assert metrics.rmse_long_m == pytest.approx(0.1)
    assert metrics.bias_long_m == pytest.approx(0.0)

    mixed = [
        record(0.01, True, True),
        record(0.2, True, False),
        record(3.0, False, False),
        record(4.0, False, False),
    ]
    metrics = summarize_runs(mixed)
    assert metrics.converged_pct == 50.0
    assert metrics.accurate_pct == 50.0

    stuck = summarize_runs([record(3.0, False, False)])
    assert stuck.accurate_pct == 0.0
    assert math.isnan(stuck.rmse_long_m)


def test_evaluation_validation(perfect_sample):
    mask = WeightMask.constant(GEOMETRY)
    with pytest.raises(ConfigError):
        evaluate_mask(mask, [perfect_sample], 1.0, trials=0, seed=0)
    with pytest.raises(ConfigError):
        evaluate_mask(
            mask, [perfect_sample], 1.0, 2, 0, cfg=IcpConfig.training_defaults()
        )
    with pytest.raises(ConfigError):
        evaluate_mask(mask, [perfect_sample], 1.0, 2, 0, dist="cauchy")


def test_worker_count_does_not_change_results(noisy_sample, perfect_sample):
    mask = WeightMask.constant(GEOMETRY)
    samples = [noisy_sample, perfect_sample]
    serial = evaluate_mask(mask, samples, 1.0, trials=4, seed=5, workers=1)
    threaded = evaluate_mask(mask, samples, 1.0, trials=4, seed=5, workers=3)
    assert serial.records == threaded.records
    assert [(r.sample, r.trial) for r in serial.records[::2]] == [
        (k, t) for k in range(2) for t in range(4)
    ]


def test_noise_suppression_needs_labels():
    scene = generate_scene(room_spec())
    sample = TrainSample.from_scene(scene, DetectorConfig(scale_a=1.0, offset_b=0.5))
    with pytest.raises(ConfigError):
        noise_suppression(WeightMask.constant(GEOMETRY), sample)


def test_config_refinement_settings():
    with pytest.raises(ConfigError):
        TrainConfig(refine_fraction=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(validation_trials=0)
    with pytest.raises(ConfigError):
        TrainConfig(validation_sigmas=(0.0, -1.0))
    cfg = TrainConfig.from_dict({"epochs": 10, "validation_sigmas": [0, 2]})
    assert cfg.validation_sigmas == (0.0, 2.0)
    assert cfg.refine_epochs == 2
    assert TrainConfig().refine_epochs == 50


def gradient_step(l_icp, pose_logit_gradient):
    gradient = np.asarray(pose_logit_gradient, dtype=np.float64)
    return MaskGradient(
        l_icp=l_icp,
        l_bce=0.0,
        mask_gradient=gradient,
        logit_gradient=gradient,
        pose_logit_gradient=gradient,
        result=None,
        step_norm=0.0,
        error_norm=0.0,
        good=True,
    )


def test_polyak_step():
    decrement = polyak_step(gradient_step(2.0, [[1.0, 1.0], [0.0, 0.0]]), 5.0)
    np.testing.assert_allclose(decrement, [[1.0, 1.0], [0.0, 0.0]])
    capped = polyak_step(gradient_step(2.0, [[1.0, 1.0], [0.0, 0.0]]), 0.25)
    np.testing.assert_allclose(capped, [[0.25, 0.25], [0.0, 0.0]])
    assert polyak_step(gradient_step(0.0, [[1.0]]), 1.0) is None
    assert polyak_step(gradient_step(1.0, [[0.0]]), 1.0) is None


def test_refinement_keeps_the_best_scoring_mask(noisy_sample):
    cfg = small_cfg(epochs=8, refine_fraction=0.5, validation_trials=2)
    result = train_mask(noisy_sample, cfg, seed=3)
    assert sum(r.refining for r in result.trace.records) == 4
    assert 4 <= result.best_epoch <= 8
    assert result.best_score == selection_score(result.mask, noisy_sample, cfg, 3)
    np.testing.assert_array_equal(
        result.mask.values, mask_from_logits(result.logits, 0.5).values
    )


def test_without_refinement_the_last_mask_is_kept(noisy_sample):
    result = train_mask(noisy_sample, small_cfg(epochs=4, refine_fraction=0.0), 3)
    assert result.best_epoch == 4
    assert math.isnan(result.best_score)


def test_selection_score_of_the_uniform_mask(perfect_sample):
    cfg = small_cfg(validation_sigmas=(0.0, 1.0), validation_trials=2)
    score = selection_score(WeightMask.constant(GEOMETRY), perfect_sample, cfg, 0)
    assert score == pytest.approx(1.0)


def test_singular_pose_errors_are_failed_runs(monkeypatch, perfect_sample):
    def singular(estimate, groundtruth):
        raise SingularityError("Rotation angle is at the +/-pi singularity")

    monkeypatch.setattr(mask_trainer, "pose_error", singular)
    mask = WeightMask.constant(GEOMETRY)
    evaluation = evaluate_mask(mask, [perfect_sample], 0.0, trials=2, seed=0)
    assert len(evaluation.records) == 4
    assert not any(r.converged for r in evaluation.records)
    assert all("singularity" in r.failure for r in evaluation.records)
    assert evaluation.metrics["weighted"].converged_pct == 0.0


@pytest.mark.slow
def test_trained_mask_suppresses_clutter():
    sample = TrainSample.from_scene(generate_scene(standard_scene_spec(seed=1)))
    result = train_mask(sample, TrainConfig(), seed=1)
    means = noise_suppression(result.mask, sample)
    weights = sample_weights(result.mask, sample.source.points)
    clutter = weights[sample.labels != STRUCTURE].mean()
    assert clutter < 0.5 * means[STRUCTURE]


@pytest.mark.slow
def test_trained_masks_beat_unweighted_on_the_standard_suite():
    samples = [
        TrainSample.from_scene(generate_scene(spec)) for spec in standard_suite(3, 0)
    ]
    masks = [train_mask(s, TrainConfig(), seed=k).mask for k, s in enumerate(samples)]
    for j, sigma in enumerate((0.0, 1.0, 2.0)):
        trials = 1 if sigma == 0.0 else 30
        records = []
        for k, (mask, sample) in enumerate(zip(masks, samples)):
            evaluation = evaluate_mask(mask, [sample], sigma, trials, seed=100 * j + k)
            records.extend(evaluation.records)
        weighted = summarize_runs([r for r in records if r.mode == "weighted"])
        unweighted = summarize_runs([r for r in records if r.mode == "unweighted"])
        assert weighted.rmse_long_m < unweighted.rmse_long_m
        assert weighted.rmse_lat_m < unweighted.rmse_lat_m
        assert weighted.rmse_head_deg < unweighted.rmse_head_deg
        assert weighted.converged_pct >= unweighted.converged_pct
        if sigma == 0.0:
            assert weighted.rmse_long_m <= 0.8 * unweighted.rmse_long_m
