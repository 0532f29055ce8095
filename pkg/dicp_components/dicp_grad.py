# dicp_components/dicp_grad.py
"""Gradients of a loss on the final ICP pose, through every unrolled iteration.

The solve is recorded by torch autograd. Nearest neighbours are either held
locally constant (argmin indices fixed, gradients flow through the selected
target coordinates) or replaced by a deterministic soft-min blend.
``check_gradient`` is the finite-difference oracle for all of it.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .config import write_json_document
from .dicp_core import (
    IcpConfig,
    IcpProblem,
    IcpResult,
    NnMode,
    check_inputs,
    iterate,
    load_pose_json,
    result_from_trace,
)
from .errors import ConfigError, DimensionMismatchError, NumericalError
from .mask_weighting import LossWeights, WeightMask, icp_loss_tensor, sampling_jacobian
from .pointcloud import PointCloud, build_index, load_pointcloud_csv
from .se_geometry import Pose, pose_error_tensor

logger = logging.getLogger(__name__)

WRT_CHOICES = ("prior_weights", "source_points", "mask_pixels")
NN_GRAD_MODES = ("locally_constant", "soft")
# each unrolled iteration keeps its tape alive until backward
MAX_UNROLL_ITERATIONS = 64
REL_ERROR_FLOOR = 1e-12


class IcpPoseLoss:
    """L_ICP of the pose error between the final estimate and a groundtruth"""

    def __init__(self, groundtruth: Pose, loss_weights: Optional[LossWeights] = None):
        self.groundtruth = groundtruth
        self.loss_weights = loss_weights or LossWeights()
        self._groundtruth_tensor = groundtruth.to_tensor()

    def __call__(self, pose: torch.Tensor) -> torch.Tensor:
        error = pose_error_tensor(pose, self._groundtruth_tensor)
        return icp_loss_tensor(error, self.loss_weights)


@dataclass(frozen=True)
class GradRequest:
    loss: Callable[[torch.Tensor], torch.Tensor]
    wrt: str = "prior_weights"
    nn_grad_mode: str = "locally_constant"
    unroll_iterations: int = 10
    mask: Optional[WeightMask] = None
    # where the mask is sampled; defaults to the source points
    sample_points: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.wrt not in WRT_CHOICES:
            raise ConfigError(f"Unknown wrt {self.wrt!r}; use one of {WRT_CHOICES}")
        if self.nn_grad_mode not in NN_GRAD_MODES:
            raise ConfigError(
                f"Unknown nn_grad_mode {self.nn_grad_mode!r}; "
                f"use one of {NN_GRAD_MODES}"
            )
        if int(self.unroll_iterations) < 1:
            raise ConfigError("unroll_iterations must be >= 1")
        if int(self.unroll_iterations) > MAX_UNROLL_ITERATIONS:
            raise ConfigError(
                f"unroll_iterations={self.unroll_iterations} exceeds the memory guard "
                f"of {MAX_UNROLL_ITERATIONS} recorded iterations"
            )
        if not callable(self.loss):
            raise ConfigError("GradRequest.loss must be callable on the final pose")
        if self.wrt == "mask_pixels" and self.mask is None:
            raise ConfigError("wrt='mask_pixels' needs GradRequest.mask")


@dataclass
class GradResult:
    gradient: np.ndarray
    loss_value: float


@dataclass
class GradientReport:
    h: float
    loss_value: float
    indices: List[int] = field(default_factory=list)
    analytic: List[float] = field(default_factory=list)
    numeric: List[float] = field(default_factory=list)
    relative_errors: List[float] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max(self.relative_errors) if self.relative_errors else 0.0

    @property
    def mean_relative_error(self) -> float:
        return float(np.mean(self.relative_errors)) if self.relative_errors else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "h": self.h,
            "loss_value": self.loss_value,
            "entries": [
                {"index": i, "g_ad": a, "g_fd": n, "relative_error": r}
                for i, a, n, r in zip(
                    self.indices, self.analytic, self.numeric, self.relative_errors
                )
            ],
            "max_relative_error": self.max_relative_error,
            "mean_relative_error": self.mean_relative_error,
        }


def central_difference(
    fn: Callable[[np.ndarray], float],
    x,
    h: float,
    entries: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central finite differences of a scalar function at the given entries.

    Entries not listed stay zero; all entries are differenced by default.
    """
    if h <= 0:
        raise ConfigError(f"Finite-difference step must be > 0, got {h}")
    x = np.array(x, dtype=np.float64)
    gradient = np.zeros_like(x)
    shifted = x.copy()
    for k in range(x.size) if entries is None else entries:
        shifted.flat[k] = x.flat[k] + h
        upper = fn(shifted)
        shifted.flat[k] = x.flat[k] - h
        lower = fn(shifted)
        shifted.flat[k] = x.flat[k]
        gradient.flat[k] = (upper - lower) / (2.0 * h)
    return gradient


def _effective_config(cfg: IcpConfig, req: GradRequest) -> IcpConfig:
    if not cfg.differentiable:
        raise ConfigError(
            "Gradients need a differentiable IcpConfig (smooth trim, pseudo-Huber)"
        )
    if cfg.update_rule.kind != "gradient_descent":
        raise ConfigError("Gradients are only recorded for gradient-descent updates")
    kind = "hard_argmin" if req.nn_grad_mode == "locally_constant" else "soft_min"
    return replace(cfg, nn_mode=NnMode(kind, cfg.nn_mode.temperature))


class _RecordedSolve:
    """Problem set-up shared by the recorded solve and the FD oracle"""

    def __init__(self, source: PointCloud, target: PointCloud, initial: Pose, cfg, req):
        self.req = req
        self.cfg = _effective_config(cfg, req)
        check_inputs(source, target, initial, self.cfg)
        self.initial = initial.to_tensor()
        self.problem = IcpProblem.from_clouds(source, build_index(target))
        self.jacobian = None
        if req.wrt == "mask_pixels":
            points = source.points if req.sample_points is None else req.sample_points
            self.jacobian = sampling_jacobian(req.mask, points)
            if self.jacobian.shape[0] != source.size:
                raise DimensionMismatchError(
                    f"{self.jacobian.shape[0]} sample points "
                    f"for {source.size} source points"
                )
            self.problem.prior = self._mask_to_weights(req.mask.values)

    def _mask_to_weights(self, values: np.ndarray) -> torch.Tensor:
        weights = self.jacobian @ np.asarray(values, dtype=np.float64).reshape(-1)
        return torch.as_tensor(weights, dtype=torch.float64)

    def base_value(self) -> np.ndarray:
        if self.req.wrt == "mask_pixels":
            return np.array(self.req.mask.values, dtype=np.float64)
        if self.req.wrt == "source_points":
            return self.problem.source.detach().numpy().copy()
        return self.problem.prior.detach().numpy().copy()

    def install(self, value) -> Optional[torch.Tensor]:
        """Put value in place of the differentiated quantity; returns the leaf"""
        if self.req.wrt == "mask_pixels":
            if isinstance(value, np.ndarray):
                self.problem.prior = self._mask_to_weights(value)
                return None
            self.problem.prior = value
            return value
        tensor = value
        if not torch.is_tensor(tensor):
            tensor = torch.as_tensor(tensor, dtype=torch.float64)
        if self.req.wrt == "source_points":
            self.problem.source = tensor
        else:
            self.problem.prior = tensor
        return tensor

    def scalar_loss(self, pose: torch.Tensor) -> torch.Tensor:
        loss = self.req.loss(pose)
        if not torch.is_tensor(loss) or loss.numel() != 1:
            raise ConfigError("GradRequest.loss must return a scalar tensor")
        return loss.reshape(())

    def run(self):
        return iterate(
            self.problem,
            self.initial,
            self.cfg,
            self.req.unroll_iterations,
            stop_early=False,
        )

    def loss_at(self, value: np.ndarray) -> float:
        with torch.no_grad():
            self.install(np.array(value, dtype=np.float64))
            return float(self.scalar_loss(self.run().pose))


def solve_with_grad(
    source: PointCloud,
    target: PointCloud,
    initial: Pose,
    cfg: IcpConfig,
    req: GradRequest,
) -> Tuple[IcpResult, GradResult]:
    """Unrolled solve plus d(loss)/d(req.wrt) by reverse accumulation"""
    recorded = _RecordedSolve(source, target, initial, cfg, req)
    if req.wrt == "mask_pixels":
        start = recorded.problem.prior
    else:
        start = torch.as_tensor(recorded.base_value(), dtype=torch.float64)
    leaf = recorded.install(start.detach().clone().requires_grad_(True))

    trace = recorded.run()
    loss = recorded.scalar_loss(trace.pose)
    (gradient,) = torch.autograd.grad(loss, leaf, allow_unused=True)
    gradient = np.zeros(tuple(leaf.shape)) if gradient is None else gradient.numpy()

    if req.wrt == "mask_pixels":
        gradient = (recorded.jacobian.T @ gradient).reshape(req.mask.values.shape)
    if not np.all(np.isfinite(gradient)):
        raise NumericalError("Non-finite gradient from the recorded solve")

    with torch.no_grad():
        result = result_from_trace(recorded.problem, trace, recorded.cfg)
    return result, GradResult(
        np.asarray(gradient, dtype=np.float64), float(loss.detach())
    )


def check_gradient(
    source: PointCloud,
    target: PointCloud,
    initial: Pose,
    cfg: IcpConfig,
    req: GradRequest,
    h: float = 1e-6,
    entries: Optional[Sequence[int]] = None,
) -> GradientReport:
    """Compare solve_with_grad against central differences of the unrecorded solve"""
    if h <= 0:
        raise ConfigError(f"Finite-difference step must be > 0, got {h}")
    _, analytic = solve_with_grad(source, target, initial, cfg, req)

    oracle = _RecordedSolve(source, target, initial, cfg, req)
    base = oracle.base_value()
    indices = range(base.size) if entries is None else [int(k) for k in entries]
    numeric = central_difference(oracle.loss_at, base, h, indices)

    report = GradientReport(h=h, loss_value=analytic.loss_value)
    for k in indices:
        fd = float(numeric.flat[k])
        ad = float(analytic.gradient.flat[k])
        report.indices.append(k)
        report.analytic.append(ad)
        report.numeric.append(fd)
        report.relative_errors.append(abs(ad - fd) / max(REL_ERROR_FLOOR, abs(fd)))

    logger.debug(
        "Gradient check over %d entries: max relative error %.3g",
        len(report.indices),
        report.max_relative_error,
    )
    return report


class GradCheckComponent:
    """``dicp grad-check``: gradient of L_ICP against finite differences"""

    def __init__(self, settings: Dict[str, Any]):
        self.settings = settings

    @staticmethod
    def add_arguments(parser) -> None:
        parser.add_argument("--source", required=True, help="source pointcloud CSV")
        parser.add_argument("--target", required=True, help="target pointcloud CSV")
        parser.add_argument("--init", help="initial pose JSON (identity if omitted)")
        parser.add_argument("--gt", help="groundtruth pose JSON (identity if omitted)")
        parser.add_argument(
            "--wrt", choices=("prior_weights", "source_points"), default="prior_weights"
        )
        parser.add_argument(
            "--nn-grad-mode", choices=NN_GRAD_MODES, dest="nn_grad_mode"
        )
        parser.add_argument("--iterations", type=int, help="unrolled iterations")
        parser.add_argument(
            "--h", type=float, default=1e-6, help="finite-difference step"
        )
        parser.add_argument("--out", required=True, help="report JSON path")

    def run(self, args) -> GradientReport:
        cfg = IcpConfig.from_dict(
            {**IcpConfig.training_defaults().to_dict(), **self.settings.get("icp", {})}
        )
        grad_settings = dict(self.settings.get("grad", {}))

        source = load_pointcloud_csv(args.source)
        target = load_pointcloud_csv(args.target)
        initial = load_pose_json(args.init) if args.init else Pose.identity(source.dim)
        groundtruth = load_pose_json(args.gt) if args.gt else Pose.identity(source.dim)
        loss_weights = LossWeights(**self.settings.get("loss_weights", {}))
        req = GradRequest(
            loss=IcpPoseLoss(groundtruth, loss_weights),
            wrt=args.wrt,
            nn_grad_mode=args.nn_grad_mode
            or grad_settings.get("nn_grad_mode", "locally_constant"),
            unroll_iterations=args.iterations
            or grad_settings.get("unroll_iterations", 3),
        )
        report = check_gradient(source, target, initial, cfg, req, h=args.h)
        logger.info(
            "Checked %d gradient entries, max relative error %.3g",
            len(report.indices),
            report.max_relative_error,
        )
        write_json_document(report.to_dict(), args.out)
        return report
