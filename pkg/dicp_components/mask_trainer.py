# dicp_components/mask_trainer.py
"""Per-scene mask training through the unrolled solver, and mask evaluation.

The mask is a W x W grid of logits; weights are sigmoid(logits) sampled
bilinearly at the scan points. Each epoch runs the recorded solve with the
map brought into the sensor frame (so the groundtruth is the identity and
the initial guess is the identity), scores L = L_ICP + gamma * L_BCE and
takes one optimiser step on the logits when the sample is good.

Training solves run in a rescaled frame where the sensor-frame map has unit
RMS radius, so L_ICP weighs heading and translation alike and one
gradient-descent step size suits any scene extent. The last
``refine_epochs`` epochs follow L_ICP alone with Polyak-sized steps; the
mask they visit that does best against the unweighted solver is kept.
"""

import concurrent.futures
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy.special import expit
from typing_extensions import Self

from .config import apply_overrides, require_positive, section
from .dicp_core import IcpConfig, IcpResult, icp_solve
from .dicp_grad import (
    MAX_UNROLL_ITERATIONS,
    NN_GRAD_MODES,
    GradRequest,
    IcpPoseLoss,
    solve_with_grad,
)
from .errors import (
    ConfigError,
    DICPError,
    EmptyCloudError,
    NumericalError,
    SingularityError,
)
from .mask_weighting import (
    LossWeights,
    MaskGeometry,
    WeightMask,
    bce_loss,
    label_weight_means,
    make_map_mask,
    sample_weights,
    save_mask,
    total_loss,
)
from .pointcloud import PointCloud
from .radar_extract import DetectorConfig, PolarScan, detect
from .scene import generate_scene, load_scene_specs, standard_scene_spec
from .se_geometry import Pose, inverse, planar_pose, pose_error, transform_points

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adaptive_moments")
DISTRIBUTIONS = ("uniform", "normal")
MODES = ("unweighted", "weighted")

# initial-guess half widths per unit noise scale
TRANSLATION_SPREAD = 0.5
HEADING_SPREAD_DEG = 2.5
CONVERGED_STEP = 1e-3
ACCURATE_TRANSLATION = 0.05
ACCURATE_HEADING_DEG = 1.0
# added to both RMSEs before the weighted/unweighted ratio
RMSE_FLOOR = 1e-9


@dataclass(frozen=True)
class TrainSample:
    scan: Optional[PolarScan]
    source: PointCloud
    map: PointCloud
    T_gt: Pose
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.source.size == 0:
            raise EmptyCloudError("Training samples need a nonempty source cloud")
        if self.map.size == 0:
            raise EmptyCloudError("Training samples need a nonempty map")
        if self.source.dim != 2 or self.map.dim != 2 or self.T_gt.dim != 2:
            raise ConfigError("Mask training works on 2D scans")

    def sensor_frame_map(self) -> np.ndarray:
        return transform_points(inverse(self.T_gt), self.map.points)

    @property
    def frame_scale(self) -> float:
        """Factor that brings the sensor-frame map to unit RMS radius"""
        points = self.sensor_frame_map()
        radius = math.sqrt(float(np.mean(np.sum(points**2, axis=1))))
        return 1.0 / radius if radius > 0.0 else 1.0

    @classmethod
    def from_scene(cls, scene, detector: Optional[DetectorConfig] = None) -> Self:
        """Sample from a Scene.

        With a detector the source cloud is taken from the rendered scan.
        """
        if detector is None:
            return cls(
                scene.scan, scene.scan_source, scene.map, scene.T_gt, scene.labels
            )
        return cls(scene.scan, detect(scene.scan, detector), scene.map, scene.T_gt)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    epochs: int = 200
    unroll_iterations: int = 10
    good_step_threshold: float = 0.01
    good_error_threshold: float = 0.4
    augment_rotation: bool = True
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: str = "adaptive_moments"
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    nn_grad_mode: str = "locally_constant"
    geometry: MaskGeometry = field(default_factory=MaskGeometry)
    max_range: Optional[float] = None
    icp: IcpConfig = field(default_factory=IcpConfig.training_defaults)
    refine_fraction: float = 0.25
    refine_max_step: float = 1.0
    validation_sigmas: Tuple[float, ...] = (0.0, 1.0, 2.0)
    validation_trials: int = 4

    def __post_init__(self):
        require_positive("learning_rate", self.learning_rate)
        require_positive("good_step_threshold", self.good_step_threshold)
        require_positive("good_error_threshold", self.good_error_threshold)
        require_positive("eps", self.eps)
        require_positive("refine_max_step", self.refine_max_step)
        if int(self.epochs) < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 1 <= int(self.unroll_iterations) <= MAX_UNROLL_ITERATIONS:
            raise ConfigError(
                f"unroll_iterations must be in [1, {MAX_UNROLL_ITERATIONS}], "
                f"got {self.unroll_iterations}"
            )
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(
                f"Unknown optimizer {self.optimizer!r}; use one of {OPTIMIZERS}"
            )
        if self.nn_grad_mode not in NN_GRAD_MODES:
            raise ConfigError(f"Unknown nn_grad_mode {self.nn_grad_mode!r}")
        if not self.icp.differentiable:
            raise ConfigError("Mask training needs a differentiable IcpConfig")
        if self.max_range is not None:
            require_positive("max_range", self.max_range)
        beta1, beta2 = self.betas
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ConfigError(
                f"Adaptive-moment betas must lie in [0, 1), got {self.betas}"
            )
        if not 0.0 <= float(self.refine_fraction) <= 1.0:
            raise ConfigError(
                f"refine_fraction must lie in [0, 1], got {self.refine_fraction}"
            )
        for sigma in self.validation_sigmas:
            require_positive("validation_sigmas", sigma, allow_zero=True)
        if int(self.validation_trials) < 1:
            raise ConfigError(
                f"validation_trials must be >= 1, got {self.validation_trials}"
            )
        object.__setattr__(
            self, "validation_sigmas", tuple(float(s) for s in self.validation_sigmas)
        )

    @property
    def map_range(self) -> float:
        return self.geometry.half_extent if self.max_range is None else self.max_range

    @property
    def refine_epochs(self) -> int:
        return int(int(self.epochs) * float(self.refine_fraction))

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        document = dict(document)
        unknown = set(document) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown TrainConfig keys: {sorted(unknown)}")
        if "loss_weights" in document:
            document["loss_weights"] = LossWeights.from_dict(document["loss_weights"])
        if "geometry" in document:
            document["geometry"] = MaskGeometry.from_dict(document["geometry"])
        if "icp" in document:
            icp = {**IcpConfig.training_defaults().to_dict(), **document["icp"]}
            document["icp"] = IcpConfig.from_dict(icp)
        for key in ("betas", "validation_sigmas"):
            if key in document:
                document[key] = tuple(document[key])
        return cls(**document)


@dataclass
class EpochRecord:
    epoch: int
    l_icp: float
    l_bce: float
    total: float
    skipped: bool
    angle: float = 0.0
    step_norm: float = float("nan")
    error_norm: float = float("nan")
    refining: bool = False


@dataclass
class TrainingTrace:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def totals(self) -> List[float]:
        return [r.total for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.__dict__ for r in self.records])
        if frame.empty:
            frame = pd.DataFrame(columns=list(EpochRecord.__dataclass_fields__))
        return frame.rename(columns={"skipped": "skipped_flag"})

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = self.to_frame()
        frame["skipped_flag"] = frame["skipped_flag"].astype(int)
        columns = ["epoch", "l_icp", "l_bce", "total", "skipped_flag"]
        frame[columns].to_csv(path, index=False, encoding="utf-8")
        return path


@dataclass
class TrainingResult:
    mask: WeightMask
    trace: TrainingTrace
    all_skipped: bool = False
    logits: Optional[np.ndarray] = None
    # number of epochs whose updates the returned mask carries
    best_epoch: int = 0
    best_score: float = float("nan")


@dataclass
class MaskGradient:
    """Everything one training epoch needs for its decision and its step"""

    l_icp: float
    l_bce: float
    mask_gradient: np.ndarray
    logit_gradient: np.ndarray
    pose_logit_gradient: np.ndarray
    result: IcpResult
    step_norm: float
    error_norm: float
    good: bool


def mask_from_logits(logits: np.ndarray, pixel_size: float) -> WeightMask:
    values = expit(np.asarray(logits, dtype=np.float64))
    return WeightMask(values, pixel_size).normalized()


def training_problem(
    sample: TrainSample, cfg: TrainConfig, angle: float = 0.0
) -> Tuple[PointCloud, PointCloud, IcpConfig]:
    """Source, target and solver settings in the rotated, rescaled frame"""
    scale = sample.frame_scale
    rotation = planar_pose(0.0, 0.0, angle)
    source = transform_points(rotation, sample.source.points)
    target = transform_points(rotation, sample.sensor_frame_map())
    return (
        PointCloud(scale * source),
        PointCloud(scale * target),
        cfg.icp.scaled(scale),
    )


def compute_mask_gradient(
    sample: TrainSample,
    logits: np.ndarray,
    cfg: TrainConfig,
    angle: float = 0.0,
    target_mask: Optional[WeightMask] = None,
) -> MaskGradient:
    """Losses and gradients for one sample with the scene rotated by angle.

    ``error_norm`` is in metres and radians; ``l_icp`` is measured in the
    rescaled training frame.
    """
    geometry = cfg.geometry
    values = expit(np.asarray(logits, dtype=np.float64))
    mask = WeightMask(values, geometry.pixel_size)
    if target_mask is None:
        target_mask = make_map_mask(sample.map, sample.T_gt, geometry, cfg.map_range)

    source, target, icp = training_problem(sample, cfg, angle)
    identity = Pose.identity(2)
    request = GradRequest(
        loss=IcpPoseLoss(identity, cfg.loss_weights),
        wrt="mask_pixels",
        nn_grad_mode=cfg.nn_grad_mode,
        unroll_iterations=cfg.unroll_iterations,
        mask=mask,
        # the mask rides with the scan, so it is sampled before rotation
        sample_points=sample.source.points,
    )
    result, grad = solve_with_grad(source, target, identity, icp, request)

    l_bce, bce_gradient = bce_loss(mask, target_mask, return_gradient=True)
    gamma = cfg.loss_weights.gamma
    slope = values * (1.0 - values)
    pose_logit_gradient = grad.gradient * slope
    logit_gradient = pose_logit_gradient + gamma * bce_gradient * slope

    step_norm = result.final_step_norm
    error = pose_error(result.pose, identity).vector
    error_norm = float(np.linalg.norm(np.r_[error[:2] / sample.frame_scale, error[2]]))
    good = step_norm < cfg.good_step_threshold and error_norm < cfg.good_error_threshold
    return MaskGradient(
        l_icp=grad.loss_value,
        l_bce=l_bce,
        mask_gradient=grad.gradient,
        logit_gradient=logit_gradient,
        pose_logit_gradient=pose_logit_gradient,
        result=result,
        step_norm=step_norm,
        error_norm=error_norm,
        good=good,
    )


def polyak_step(step: MaskGradient, max_step: float) -> Optional[np.ndarray]:
    """Logit decrement (L_ICP / |g|^2) g for the pose loss alone.

    The largest pixel change is capped at ``max_step``; None when L_ICP or its
    gradient vanishes.
    """
    gradient = step.pose_logit_gradient
    squared = float(np.sum(gradient**2))
    if step.l_icp <= 0.0 or squared <= 0.0:
        return None
    decrement = (step.l_icp / squared) * gradient
    largest = float(np.max(np.abs(decrement)))
    if largest > max_step:
        decrement *= max_step / largest
    return decrement


def _validation_seed(seed: int, index: int) -> int:
    sequence = np.random.SeedSequence(seed, spawn_key=(index,))
    return int(sequence.generate_state(1)[0])


def _ratio(weighted: float, unweighted: float) -> float:
    if math.isnan(weighted):
        return 1.0 if math.isnan(unweighted) else math.inf
    if math.isnan(unweighted):
        return 0.0
    return (weighted + RMSE_FLOOR) / (unweighted + RMSE_FLOOR)


def selection_score(
    mask: WeightMask, sample: TrainSample, cfg: TrainConfig, seed: int
) -> float:
    """How a mask compares with the unweighted solver on its training scene.

    The worst weighted/unweighted RMSE ratio over components and validation
    noise scales, plus one for every scale where the weighted solver
    converges or lands accurately less often. Lower is better.
    """
    worst = 0.0
    penalty = 0
    for j, sigma in enumerate(cfg.validation_sigmas):
        trials = 1 if sigma == 0.0 else int(cfg.validation_trials)
        evaluation = evaluate_mask(
            mask, [sample], sigma, trials, seed=_validation_seed(seed, j)
        )
        weighted = evaluation.metrics["weighted"]
        unweighted = evaluation.metrics["unweighted"]
        penalty += weighted.converged_pct < unweighted.converged_pct
        penalty += weighted.accurate_pct < unweighted.accurate_pct
        for component in ("rmse_long_m", "rmse_lat_m", "rmse_head_deg"):
            ratio = _ratio(getattr(weighted, component), getattr(unweighted, component))
            worst = max(worst, ratio)
    return float(penalty) + worst


@dataclass
class _Selection:
    sample: TrainSample
    cfg: TrainConfig
    seed: int
    best_score: float = math.inf
    best_epoch: int = 0
    best_logits: Optional[np.ndarray] = None

    def offer(self, epoch: int, logits: np.ndarray) -> None:
        mask = mask_from_logits(logits, self.cfg.geometry.pixel_size)
        score = selection_score(mask, self.sample, self.cfg, self.seed)
        logger.debug("Mask after %d epochs scores %.4g", epoch, score)
        if score < self.best_score:
            self.best_score = score
            self.best_epoch = epoch
            self.best_logits = logits.copy()


def _optimizer(parameter: torch.Tensor, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD([parameter], lr=cfg.learning_rate)
    return torch.optim.Adam(
        [parameter], lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps
    )


def train_mask(sample: TrainSample, cfg: TrainConfig, seed: int = 0) -> TrainingResult:
    """Optimise per-scene mask logits; returns the normalised mask and trace"""
    geometry = cfg.geometry
    logits = torch.zeros(
        (geometry.width, geometry.width), dtype=torch.float64, requires_grad=True
    )
    optimizer = _optimizer(logits, cfg)
    target_mask = make_map_mask(sample.map, sample.T_gt, geometry, cfg.map_range)
    rng = np.random.default_rng(seed)
    trace = TrainingTrace()
    shaping = int(cfg.epochs) - cfg.refine_epochs
    selection = None
    if cfg.refine_epochs and cfg.validation_sigmas:
        selection = _Selection(sample, cfg, seed)

    for epoch in range(int(cfg.epochs)):
        refining = epoch >= shaping
        if selection is not None and epoch == shaping:
            selection.offer(epoch, logits.detach().numpy().copy())
        angle = float(rng.uniform(0.0, 2.0 * math.pi)) if cfg.augment_rotation else 0.0
        current = logits.detach().numpy().copy()
        try:
            step = compute_mask_gradient(sample, current, cfg, angle, target_mask)
        except NumericalError as e:
            logger.debug("Epoch %d skipped: %s", epoch, e)
            trace.records.append(
                EpochRecord(
                    epoch, math.nan, math.nan, math.nan, True, angle, refining=refining
                )
            )
            continue
        losses = total_loss(step.l_icp, step.l_bce, cfg.loss_weights)
        trace.records.append(
            EpochRecord(
                epoch=epoch,
                l_icp=losses.l_icp,
                l_bce=losses.l_bce,
                total=losses.total,
                skipped=not step.good,
                angle=angle,
                step_norm=step.step_norm,
                error_norm=step.error_norm,
                refining=refining,
            )
        )
        if not step.good:
            logger.debug(
                "Epoch %d skipped (step %.3g, error %.3g)",
                epoch,
                step.step_norm,
                step.error_norm,
            )
            continue

        if refining:
            decrement = polyak_step(step, cfg.refine_max_step)
            if decrement is None:
                continue
            with torch.no_grad():
                logits -= torch.from_numpy(decrement)
            if selection is not None:
                selection.offer(epoch + 1, logits.detach().numpy().copy())
        else:
            optimizer.zero_grad()
            logits.grad = torch.from_numpy(step.logit_gradient.copy())
            optimizer.step()
        logger.debug(
            "Epoch %d: L=%.6g (icp %.6g, bce %.6g)",
            epoch,
            losses.total,
            losses.l_icp,
            losses.l_bce,
        )

    final_logits = logits.detach().numpy().copy()
    best_epoch, best_score = int(cfg.epochs), math.nan
    if selection is not None and selection.best_logits is not None:
        final_logits = selection.best_logits
        best_epoch, best_score = selection.best_epoch, selection.best_score
        logger.debug("Keeping the mask after %d epochs", best_epoch)
    all_skipped = all(r.skipped for r in trace.records)
    if all_skipped:
        logger.warning("Every training epoch was skipped; returning the initial mask")
    return TrainingResult(
        mask=mask_from_logits(final_logits, geometry.pixel_size),
        trace=trace,
        all_skipped=all_skipped,
        logits=final_logits,
        best_epoch=best_epoch,
        best_score=best_score,
    )


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class RunRecord:
    sample: int
    trial: int
    mode: str
    sigma: float
    init_x: float
    init_y: float
    init_heading_deg: float
    err_long_m: float
    err_lat_m: float
    err_head_deg: float
    step_norm: float
    iterations: int
    converged: bool
    accurate: bool
    failure: str = ""


@dataclass
class ModeMetrics:
    mode: str
    runs: int
    converged_pct: float
    accurate_pct: float
    rmse_long_m: float
    rmse_lat_m: float
    rmse_head_deg: float
    bias_long_m: float
    bias_lat_m: float
    bias_head_deg: float

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class MaskEvaluation:
    sigma: float
    metrics: Dict[str, ModeMetrics]
    records: List[RunRecord]


def is_accurate(err_long: float, err_lat: float, err_head_deg: float) -> bool:
    return (
        math.hypot(err_long, err_lat) < ACCURATE_TRANSLATION
        and abs(err_head_deg) < ACCURATE_HEADING_DEG
    )


def summarize_runs(records: Sequence[RunRecord], mode: str = "") -> ModeMetrics:
    """RMSE and bias over converged runs; accurate % is relative to converged runs"""
    converged = [r for r in records if r.converged]
    errors = np.array(
        [[r.err_long_m, r.err_lat_m, r.err_head_deg] for r in converged],
        dtype=np.float64,
    ).reshape(-1, 3)
    if errors.shape[0]:
        rmse = np.sqrt(np.mean(errors**2, axis=0))
        bias = np.mean(errors, axis=0)
    else:
        rmse = bias = np.full(3, np.nan)
    runs = len(records)
    accurate = sum(1 for r in converged if r.accurate)
    return ModeMetrics(
        mode=mode,
        runs=runs,
        converged_pct=100.0 * len(converged) / runs if runs else 0.0,
        accurate_pct=100.0 * accurate / len(converged) if converged else 0.0,
        rmse_long_m=float(rmse[0]),
        rmse_lat_m=float(rmse[1]),
        rmse_head_deg=float(rmse[2]),
        bias_long_m=float(bias[0]),
        bias_lat_m=float(bias[1]),
        bias_head_deg=float(bias[2]),
    )


def initial_offset(
    rng: np.random.Generator, sigma: float, dist: str = "uniform"
) -> Tuple[float, float, float]:
    """(x, y, heading in radians) perturbation for noise scale sigma"""
    half_t = TRANSLATION_SPREAD * sigma
    half_h = math.radians(HEADING_SPREAD_DEG * sigma)
    if dist == "normal":
        return (
            float(rng.normal(0.0, half_t)),
            float(rng.normal(0.0, half_t)),
            float(rng.normal(0.0, half_h)),
        )
    return (
        float(rng.uniform(-half_t, half_t)),
        float(rng.uniform(-half_t, half_t)),
        float(rng.uniform(-half_h, half_h)),
    )


def _solve_run(source: PointCloud, target: PointCloud, offset, cfg: IcpConfig):
    try:
        result = icp_solve(source, target, planar_pose(*offset), cfg)
    except DICPError as e:
        logger.warning("Run failed, recorded as not converged: %s", e)
        return None, str(e)
    return result, result.failure or ""


def _record(sample, trial, mode, sigma, offset, result, failure) -> RunRecord:
    error = np.full(3, np.nan)
    step_norm, iterations = float("inf"), 0
    if result is not None:
        step_norm, iterations = result.final_step_norm, result.iterations_run
        try:
            error = pose_error(result.pose, Pose.identity(2)).vector
        except SingularityError as e:
            logger.warning("Run recorded as not converged: %s", e)
            failure = failure or str(e)
    err_head_deg = math.degrees(error[2])
    converged = bool(np.all(np.isfinite(error))) and step_norm < CONVERGED_STEP
    return RunRecord(
        sample=sample,
        trial=trial,
        mode=mode,
        sigma=float(sigma),
        init_x=offset[0],
        init_y=offset[1],
        init_heading_deg=math.degrees(offset[2]),
        err_long_m=float(error[0]),
        err_lat_m=float(error[1]),
        err_head_deg=err_head_deg,
        step_norm=float(step_norm),
        iterations=int(iterations),
        converged=bool(converged),
        accurate=bool(converged and is_accurate(error[0], error[1], err_head_deg)),
        failure=failure,
    )


def evaluate_mask(
    mask: WeightMask,
    samples: Sequence[TrainSample],
    noise_scale: float,
    trials: int,
    seed: int,
    cfg: Optional[IcpConfig] = None,
    dist: str = "uniform",
    workers: int = 1,
    initial: str = "perturbed",
) -> MaskEvaluation:
    """Weighted vs unweighted solves from perturbed initial guesses.

    Every (sample, trial) pair draws its offset from its own seed substream,
    so results do not depend on the worker count.
    """
    cfg = cfg or IcpConfig.evaluation_defaults()
    if cfg.differentiable:
        raise ConfigError("Evaluation uses the non-differentiable solver")
    if dist not in DISTRIBUTIONS:
        raise ConfigError(f"Unknown distribution {dist!r}; use one of {DISTRIBUTIONS}")
    if int(trials) < 1:
        raise ConfigError("evaluate_mask needs at least one trial")
    require_positive("noise_scale", noise_scale, allow_zero=True)

    prepared = []
    for sample in samples:
        target = PointCloud(sample.sensor_frame_map())
        weighted = sample.source.with_prior_weights(
            np.clip(sample_weights(mask, sample.source.points), 0.0, 1.0)
        )
        unweighted = sample.source.with_prior_weights(None)
        prepared.append((target, {"unweighted": unweighted, "weighted": weighted}))

    def run_pair(k: int, t: int) -> List[RunRecord]:
        if initial == "groundtruth":
            offset = (0.0, 0.0, 0.0)
        else:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(k, t)))
            offset = initial_offset(rng, noise_scale, dist)
        target, sources = prepared[k]
        records = []
        for mode in MODES:
            result, failure = _solve_run(sources[mode], target, offset, cfg)
            records.append(_record(k, t, mode, noise_scale, offset, result, failure))
        return records

    keys = [(k, t) for k in range(len(prepared)) for t in range(int(trials))]
    results: Dict[Tuple[int, int], List[RunRecord]] = {}
    max_workers = max(1, int(workers))
    with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_key = {executor.submit(run_pair, k, t): (k, t) for k, t in keys}
        for future in concurrent.futures.as_completed(future_to_key):
            results[future_to_key[future]] = future.result()

    records = [record for key in keys for record in results[key]]
    metrics = {
        mode: summarize_runs([r for r in records if r.mode == mode], mode)
        for mode in MODES
    }
    return MaskEvaluation(sigma=float(noise_scale), metrics=metrics, records=records)


def validate_mask(
    mask: WeightMask,
    samples: Sequence[TrainSample],
    cfg: Optional[IcpConfig] = None,
) -> MaskEvaluation:
    """Solve from the groundtruth for both modes, no initial-guess noise"""
    return evaluate_mask(mask, samples, 0.0, 1, seed=0, cfg=cfg, initial="groundtruth")


def noise_suppression(mask: WeightMask, sample: TrainSample) -> Dict[str, float]:
    """Mean sampled weight per source label"""
    if sample.labels is None:
        raise ConfigError("Sample carries no point labels")
    return label_weight_means(sample_weights(mask, sample.source.points), sample.labels)


class TrainMaskComponent:
    """``dicp train-mask``: train a mask on one scene and write it out"""

    def __init__(self, settings: Dict[str, Any]):
        self.settings = settings

    @staticmethod
    def add_arguments(parser) -> None:
        parser.add_argument("--scenes", help="scenes JSON (see --scene-index)")
        parser.add_argument("--scene-index", type=int, default=0, dest="scene_index")
        parser.add_argument("--epochs", type=int)
        parser.add_argument("--lr", type=float, dest="learning_rate")
        parser.add_argument("--gamma", type=float)
        parser.add_argument("--no-augment", action="store_true", dest="no_augment")
        parser.add_argument(
            "--from-detections",
            action="store_true",
            dest="from_detections",
            help="train on BFAR detections of the rendered scan",
        )
        parser.add_argument("--out", required=True, help="output directory")

    def build_config(self, args) -> TrainConfig:
        document = apply_overrides(
            {"train": section(self.settings, "train")},
            {
                "train.epochs": args.epochs,
                "train.learning_rate": args.learning_rate,
                "train.loss_weights.gamma": args.gamma,
                "train.augment_rotation": False if args.no_augment else None,
            },
        )
        return TrainConfig.from_dict(document["train"])

    def run(self, args) -> TrainingResult:
        cfg = self.build_config(args)
        if args.scenes:
            specs = load_scene_specs(args.scenes)
            if not 0 <= args.scene_index < len(specs):
                raise ConfigError(f"--scene-index {args.scene_index} out of range")
            spec = specs[args.scene_index]
        else:
            spec = standard_scene_spec(args.seed)
        scene = generate_scene(spec)
        detector = None
        if args.from_detections:
            detector = DetectorConfig.from_dict(section(self.settings, "detector"))
        sample = TrainSample.from_scene(scene, detector)

        width = cfg.geometry.width
        logger.info("Training a %dx%d mask for %d epochs", width, width, cfg.epochs)
        result = train_mask(sample, cfg, seed=args.seed)
        skipped = sum(1 for r in result.trace.records if r.skipped)
        logger.info(
            "Finished training (%d of %d epochs skipped), keeping the mask after "
            "%d epochs",
            skipped,
            len(result.trace.records),
            result.best_epoch,
        )

        out = Path(args.out)
        save_mask(result.mask, out / "mask")
        result.trace.save_csv(out / "trace.csv")
        if sample.labels is not None:
            for label, mean in sorted(noise_suppression(result.mask, sample).items()):
                logger.info("Mean weight over %s points: %.3f", label, mean)
        return result
