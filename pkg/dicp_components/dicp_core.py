# dicp_components/dicp_core.py
"""Weighted, trimmed, robust ICP.

One iteration:
  1. correspondences (hard argmin through the kd-tree, or a soft-min blend
     of all target points),
  2. residuals, trim gate, robust weight and prior weight folded into
     W = diag(rho(e) * w_p),
  3. a left-multiplied twist update, by gradient descent or Gauss-Newton.

All iteration math runs on float64 torch tensors so the same code path can
be recorded by autograd (see dicp_grad).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import torch
from typing_extensions import Self

from .config import load_json_document, require_positive, write_json_document
from .errors import (
    ConfigError,
    DimensionMismatchError,
    EmptyCloudError,
    NoCorrespondencesError,
)
from .pointcloud import NnIndex, PointCloud, build_index, load_pointcloud_csv
from .se_geometry import Pose, Twist, exp_tensor, transform_tensor

logger = logging.getLogger(__name__)

ERROR_MODELS = ("point_to_point", "point_to_plane")
ROBUST_KINDS = ("none", "cauchy", "pseudo_huber")
NN_KINDS = ("hard_argmin", "soft_min")
UPDATE_KINDS = ("gradient_descent", "gauss_newton")

# Levenberg damping kicks in above this condition estimate
MAX_CONDITION = 1e12
DAMPING_SCALE = 1e-6
# Twist components kept when a 3D problem is solved in the plane
PLANAR_DOFS = (0, 1, 5)


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "none"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ROBUST_KINDS:
            raise ConfigError(
                f"Unknown robust loss {self.kind!r}; use one of {ROBUST_KINDS}"
            )
        require_positive("robust_loss.scale", self.scale)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, document) -> Self:
        if isinstance(document, str):
            return cls(kind=document)
        return cls(**document)


@dataclass(frozen=True)
class NnMode:
    kind: str = "hard_argmin"
    temperature: float = 0.01

    def __post_init__(self):
        if self.kind not in NN_KINDS:
            raise ConfigError(f"Unknown nn_mode {self.kind!r}; use one of {NN_KINDS}")
        require_positive("nn_mode.temperature", self.temperature)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "temperature": float(self.temperature)}

    @classmethod
    def from_dict(cls, document) -> Self:
        if isinstance(document, str):
            return cls(kind=document)
        return cls(**document)


@dataclass(frozen=True)
class UpdateRule:
    kind: str = "gauss_newton"
    step_size: float = 0.1

    def __post_init__(self):
        if self.kind not in UPDATE_KINDS:
            raise ConfigError(
                f"Unknown update_rule {self.kind!r}; use one of {UPDATE_KINDS}"
            )
        require_positive("update_rule.step_size", self.step_size)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "step_size": float(self.step_size)}

    @classmethod
    def from_dict(cls, document) -> Self:
        if isinstance(document, str):
            return cls(kind=document)
        return cls(**document)


@dataclass(frozen=True)
class IcpConfig:
    """Solver settings.

    When ``update_rule`` is left unset it resolves to gradient descent in
    differentiable mode and Gauss-Newton otherwise. ``trim_distance=None``
    disables trimming.
    """

    error_model: str = "point_to_point"
    robust_loss: RobustLoss = field(default_factory=RobustLoss)
    trim_distance: Optional[float] = None
    trim_steepness: float = 10.0
    nn_mode: NnMode = field(default_factory=NnMode)
    update_rule: Optional[UpdateRule] = None
    max_iterations: int = 50
    convergence_step_norm: float = 1e-3
    dimension_mode: int = 2
    differentiable: bool = False

    def __post_init__(self):
        if self.error_model not in ERROR_MODELS:
            raise ConfigError(
                f"Unknown error_model {self.error_model!r}; use one of {ERROR_MODELS}"
            )
        for name, kind in (
            ("robust_loss", RobustLoss),
            ("nn_mode", NnMode),
            ("update_rule", UpdateRule),
        ):
            value = getattr(self, name)
            if value is not None and not isinstance(value, kind):
                object.__setattr__(self, name, kind.from_dict(value))
        if self.update_rule is None:
            default = "gradient_descent" if self.differentiable else "gauss_newton"
            object.__setattr__(self, "update_rule", UpdateRule(kind=default))
        if self.trim_distance is not None:
            require_positive("trim_distance", self.trim_distance)
        require_positive("trim_steepness", self.trim_steepness)
        require_positive("convergence_step_norm", self.convergence_step_norm)
        if int(self.max_iterations) < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        object.__setattr__(self, "max_iterations", int(self.max_iterations))
        if self.dimension_mode not in (2, 3):
            raise ConfigError(
                f"dimension_mode must be 2 or 3, got {self.dimension_mode}"
            )

    @property
    def trim_enabled(self) -> bool:
        return self.trim_distance is not None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error_model": self.error_model,
            "robust_loss": self.robust_loss.to_dict(),
            "trim_distance": self.trim_distance,
            "trim_steepness": self.trim_steepness,
            "nn_mode": self.nn_mode.to_dict(),
            "update_rule": self.update_rule.to_dict(),
            "max_iterations": self.max_iterations,
            "convergence_step_norm": self.convergence_step_norm,
            "dimension_mode": self.dimension_mode,
            "differentiable": self.differentiable,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        known = set(cls.__dataclass_fields__)
        unknown = set(document) - known
        if unknown:
            raise ConfigError(f"Unknown IcpConfig keys: {sorted(unknown)}")
        return cls(**document)

    def scaled(self, factor: float) -> Self:
        """Same solver for coordinates multiplied by ``factor``.

        Distances scale with the coordinates; the gradient-descent step is
        left as is.
        """
        require_positive("factor", factor)
        trim = None if self.trim_distance is None else self.trim_distance * factor
        robust = replace(self.robust_loss, scale=self.robust_loss.scale * factor)
        return replace(
            self,
            robust_loss=robust,
            trim_distance=trim,
            trim_steepness=self.trim_steepness / factor,
            nn_mode=replace(
                self.nn_mode, temperature=self.nn_mode.temperature * factor**2
            ),
        )

    @classmethod
    def evaluation_defaults(cls, **overrides) -> Self:
        """Practical non-differentiable ICP: Cauchy(1.0), 5 m trim, 50 iterations"""
        settings = {
            "robust_loss": RobustLoss("cauchy", 1.0),
            "trim_distance": 5.0,
            "max_iterations": 50,
            "differentiable": False,
        }
        settings.update(overrides)
        return cls(**settings)

    @classmethod
    def training_defaults(cls, **overrides) -> Self:
        """Unrolled differentiable ICP used while training masks"""
        settings = {
            "robust_loss": RobustLoss("cauchy", 1.0),
            "trim_distance": 5.0,
            "update_rule": UpdateRule("gradient_descent", 1e-3),
            "max_iterations": 10,
            "differentiable": True,
        }
        settings.update(overrides)
        return cls(**settings)


@dataclass
class IcpResult:
    pose: Pose
    objective: float
    iterations_run: int
    step_norms: List[float]
    converged: bool
    correspondence_weights: np.ndarray
    objectives: List[float] = field(default_factory=list)
    damped: bool = False
    failure: Optional[str] = None

    @property
    def final_step_norm(self) -> float:
        return self.step_norms[-1] if self.step_norms else float("inf")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pose": self.pose.to_dict(),
            "objective": float(self.objective),
            "iterations_run": self.iterations_run,
            "step_norms": [float(v) for v in self.step_norms],
            "objectives": [float(v) for v in self.objectives],
            "converged": self.converged,
            "damped": self.damped,
            "failure": self.failure,
            "correspondence_weights": [float(v) for v in self.correspondence_weights],
        }


# ---------------------------------------------------------------------------
# per-residual pieces


def _safe_norm(values: torch.Tensor) -> torch.Tensor:
    """Row norms whose gradient is zero (not NaN) at the origin"""
    squared = (values**2).sum(dim=-1)
    positive = squared > 0
    return torch.where(
        positive,
        torch.sqrt(torch.where(positive, squared, torch.ones_like(squared))),
        torch.zeros_like(squared),
    )


def point_error_tensor(
    moved: torch.Tensor,
    matched: torch.Tensor,
    normals: Optional[torch.Tensor],
    error_model: str,
) -> torch.Tensor:
    """(n, D) displacements or (n, 1) projections onto the target normals"""
    displacement = moved - matched
    if error_model == "point_to_point":
        return displacement
    if normals is None:
        raise ConfigError("point_to_plane errors need target normals")
    return (normals * displacement).sum(dim=-1, keepdim=True)


def trim_gate_tensor(distance: torch.Tensor, cfg: IcpConfig) -> torch.Tensor:
    if not cfg.trim_enabled:
        return torch.ones_like(distance)
    if cfg.differentiable:
        return 0.5 * (
            1.0 - torch.tanh(cfg.trim_steepness * (distance - cfg.trim_distance))
        )
    return (distance <= cfg.trim_distance).to(distance.dtype)


def robust_weight_tensor(squared_norm: torch.Tensor, cfg: IcpConfig) -> torch.Tensor:
    """IRLS weight so that W e is the gradient of the robust cost"""
    loss = cfg.robust_loss
    if loss.kind == "none":
        return torch.ones_like(squared_norm)
    ratio = squared_norm / loss.scale**2
    if loss.kind == "cauchy":
        return 1.0 / (1.0 + ratio)
    if cfg.differentiable:
        return 1.0 / torch.sqrt(1.0 + ratio)
    # true Huber when differentiability is off
    inside = ratio <= 1.0
    safe = torch.where(inside, torch.ones_like(ratio), ratio)
    return torch.where(inside, torch.ones_like(ratio), 1.0 / torch.sqrt(safe))


def point_error(pose: Pose, s, q, normal=None, error_model: str = "point_to_point"):
    """e = T s - q, or n^T (T s - q) for point-to-plane"""
    if error_model == "point_to_plane" and normal is None:
        raise ConfigError("point_to_plane errors need a normal")
    moved = transform_tensor(pose.to_tensor(), _tensor(np.reshape(s, (1, -1))))
    normals = None if normal is None else _tensor(np.reshape(normal, (1, -1)))
    error = point_error_tensor(
        moved, _tensor(np.reshape(q, (1, -1))), normals, error_model
    )
    if error_model == "point_to_plane":
        return float(error[0, 0])
    return error[0].numpy()


def trim_gate(distance: float, cfg: IcpConfig) -> float:
    return float(
        trim_gate_tensor(torch.tensor(float(distance), dtype=torch.float64), cfg)
    )


def robust_weight(error, cfg: IcpConfig) -> float:
    squared = float(np.sum(np.square(np.asarray(error, dtype=np.float64))))
    return float(robust_weight_tensor(torch.tensor(squared, dtype=torch.float64), cfg))


# ---------------------------------------------------------------------------
# iteration machinery


def _tensor(array) -> torch.Tensor:
    return torch.from_numpy(np.array(array, dtype=np.float64))


@dataclass
class IcpProblem:
    """Tensor view of one registration problem.

    ``source``, ``prior`` and ``target`` may be autograd leaves; the kd-tree
    in ``index`` only ever sees detached coordinates.
    """

    source: torch.Tensor
    prior: torch.Tensor
    target: torch.Tensor
    index: NnIndex
    target_normals: Optional[torch.Tensor] = None
    normal_valid: Optional[torch.Tensor] = None

    @property
    def dim(self) -> int:
        return self.source.shape[1]

    @classmethod
    def from_clouds(cls, source: PointCloud, index: NnIndex) -> Self:
        target = index.target
        normals = valid = None
        if target.normals is not None:
            normals = _tensor(target.normals)
            valid = _tensor(target.normal_valid.astype(np.float64))
        return cls(
            source=_tensor(source.points),
            prior=_tensor(source.weights_or_ones()),
            target=_tensor(target.points),
            index=index,
            target_normals=normals,
            normal_valid=valid,
        )


@dataclass
class StepOutput:
    pose: torch.Tensor
    step: torch.Tensor
    weights: torch.Tensor
    objective: torch.Tensor
    damped: bool = False


def correspondences(problem: IcpProblem, moved: torch.Tensor, cfg: IcpConfig):
    """Matched target points, their normals and normal validity"""
    normals = valid = None
    if cfg.nn_mode.kind == "hard_argmin":
        indices, _ = problem.index.query(moved.detach().cpu().numpy())
        selector = torch.from_numpy(indices)
        matched = problem.target[selector]
        if problem.target_normals is not None:
            normals = problem.target_normals[selector]
            valid = problem.normal_valid[selector]
        return matched, normals, valid

    difference = moved[:, None, :] - problem.target[None, :, :]
    probabilities = torch.softmax(
        -(difference**2).sum(dim=-1) / cfg.nn_mode.temperature, dim=1
    )
    matched = probabilities @ problem.target
    if problem.target_normals is not None:
        blended = probabilities @ problem.target_normals
        length = _safe_norm(blended)
        safe = torch.where(length > 0, length, torch.ones_like(length))
        normals = blended / safe[:, None]
        valid = probabilities @ problem.normal_valid
    return matched, normals, valid


def _residual_jacobian(moved: torch.Tensor, normals, error_model: str) -> torch.Tensor:
    """d e / d xi for a left perturbation exp(xi) T, shape (n, r, dof)"""
    n, dim = moved.shape
    one = torch.ones(n, dtype=moved.dtype)
    zero = torch.zeros(n, dtype=moved.dtype)
    if dim == 2:
        px, py = moved[:, 0], moved[:, 1]
        rows = [
            torch.stack([one, zero, -py], dim=-1),
            torch.stack([zero, one, px], dim=-1),
        ]
    else:
        px, py, pz = moved[:, 0], moved[:, 1], moved[:, 2]
        rows = [
            torch.stack([one, zero, zero, zero, pz, -py], dim=-1),
            torch.stack([zero, one, zero, -pz, zero, px], dim=-1),
            torch.stack([zero, zero, one, py, -px, zero], dim=-1),
        ]
    jacobian = torch.stack(rows, dim=1)
    if error_model == "point_to_plane":
        jacobian = torch.einsum("ni,nid->nd", normals, jacobian).unsqueeze(1)
    return jacobian


def weighted_residuals(problem: IcpProblem, pose: torch.Tensor, cfg: IcpConfig):
    """Moved points, residuals and combined weights rho(e) * w_p at pose"""
    moved = transform_tensor(pose, problem.source)
    matched, normals, valid = correspondences(problem, moved, cfg)
    errors = point_error_tensor(moved, matched, normals, cfg.error_model)
    squared = (errors**2).sum(dim=-1)
    gate = trim_gate_tensor(_safe_norm(moved - matched), cfg)
    weights = robust_weight_tensor(squared, cfg) * gate * problem.prior
    if cfg.error_model == "point_to_plane":
        weights = weights * valid
    return moved, normals, errors, squared, weights


def objective_at(
    problem: IcpProblem, pose: torch.Tensor, cfg: IcpConfig
) -> torch.Tensor:
    """J = 1/2 e^T W e with fresh correspondences"""
    _, _, _, squared, weights = weighted_residuals(problem, pose, cfg)
    return 0.5 * (weights * squared).sum()


def _active_dofs(problem: IcpProblem, cfg: IcpConfig) -> Optional[List[int]]:
    if problem.dim == 3 and cfg.dimension_mode == 2:
        return list(PLANAR_DOFS)
    return None


def step_tensors(problem: IcpProblem, pose: torch.Tensor, cfg: IcpConfig) -> StepOutput:
    """One ICP iteration on tensors"""
    moved, normals, errors, squared, weights = weighted_residuals(problem, pose, cfg)
    if float(weights.detach().sum()) <= 0.0:
        raise NoCorrespondencesError("All correspondence weights are zero")

    objective = 0.5 * (weights * squared).sum()
    jacobian = _residual_jacobian(moved, normals, cfg.error_model)
    gradient = torch.einsum("n,nrd,nr->d", weights, jacobian, errors)
    dof = gradient.shape[0]
    active = _active_dofs(problem, cfg)
    damped = False

    if cfg.update_rule.kind == "gradient_descent":
        step = -cfg.update_rule.step_size * gradient
        if active is not None:
            keep = torch.zeros(dof, dtype=step.dtype)
            keep[active] = 1.0
            step = step * keep
    else:
        hessian = torch.einsum("n,nrd,nre->de", weights, jacobian, jacobian)
        selector = list(range(dof)) if active is None else active
        reduced = hessian[selector][:, selector]
        rhs = gradient[selector]
        if float(torch.linalg.cond(reduced.detach())) > MAX_CONDITION:
            damping = DAMPING_SCALE * torch.trace(reduced) / len(selector)
            if float(damping) <= 0.0:
                damping = torch.tensor(DAMPING_SCALE, dtype=reduced.dtype)
            reduced = reduced + damping * torch.eye(len(selector), dtype=reduced.dtype)
            damped = True
            logger.debug(
                "Gauss-Newton system ill-conditioned, damping with %g", float(damping)
            )
        solution = -torch.linalg.solve(reduced, rhs)
        step = torch.zeros(dof, dtype=solution.dtype)
        step = step.index_put((torch.tensor(selector),), solution)

    new_pose = exp_tensor(step) @ pose
    return StepOutput(new_pose, step, weights, objective, damped)


@dataclass
class IterationTrace:
    pose: torch.Tensor
    step_norms: List[float] = field(default_factory=list)
    objectives: List[float] = field(default_factory=list)
    weights: Optional[torch.Tensor] = None
    damped: bool = False
    failure: Optional[str] = None


def iterate(
    problem: IcpProblem,
    initial: torch.Tensor,
    cfg: IcpConfig,
    iterations: int,
    stop_early: bool = True,
) -> IterationTrace:
    """Run up to ``iterations`` steps; stop at convergence when stop_early"""
    trace = IterationTrace(pose=initial)
    for _ in range(iterations):
        try:
            output = step_tensors(problem, trace.pose, cfg)
        except NoCorrespondencesError as e:
            if not stop_early:
                raise
            logger.debug("Stopping solve: %s", e)
            trace.failure = str(e)
            break
        trace.pose = output.pose
        trace.weights = output.weights
        trace.damped = trace.damped or output.damped
        step_norm = float(torch.linalg.norm(output.step.detach()))
        trace.step_norms.append(step_norm)
        trace.objectives.append(float(output.objective.detach()))
        if stop_early and step_norm < cfg.convergence_step_norm:
            break
    return trace


def check_inputs(
    source: PointCloud, target: PointCloud, initial: Pose, cfg: IcpConfig
) -> None:
    if source.size == 0 or target.size == 0:
        raise EmptyCloudError("ICP needs nonempty source and target clouds")
    if source.dim != target.dim or source.dim != initial.dim:
        raise DimensionMismatchError(
            f"Source {source.dim}D, target {target.dim}D "
            f"and pose {initial.dim}D disagree"
        )
    if source.dim == 2 and cfg.dimension_mode == 3:
        raise ConfigError("dimension_mode 3 needs 3D clouds")
    if cfg.error_model == "point_to_plane" and target.normals is None:
        raise ConfigError("point_to_plane needs target normals (see estimate_normals)")


def result_from_trace(
    problem: IcpProblem, trace: IterationTrace, cfg: IcpConfig
) -> IcpResult:
    pose = trace.pose.detach()
    if trace.weights is None:
        weights = np.zeros(problem.source.shape[0])
    else:
        weights = trace.weights.detach().numpy().copy()
    try:
        objective = float(objective_at(problem, pose, cfg).detach())
    except NoCorrespondencesError:
        objective = 0.0
    converged = (
        trace.failure is None
        and bool(trace.step_norms)
        and trace.step_norms[-1] < cfg.convergence_step_norm
    )
    return IcpResult(
        pose=Pose.from_tensor(pose),
        objective=objective,
        iterations_run=len(trace.step_norms),
        step_norms=list(trace.step_norms),
        converged=converged,
        correspondence_weights=weights,
        objectives=list(trace.objectives),
        damped=trace.damped,
        failure=trace.failure,
    )


def icp_step(
    source: PointCloud, index: NnIndex, pose: Pose, cfg: IcpConfig
) -> Tuple[Pose, Twist, np.ndarray]:
    """One iteration from pose: (updated pose, step twist, combined weights)"""
    check_inputs(source, index.target, pose, cfg)
    problem = IcpProblem.from_clouds(source, index)
    with torch.no_grad():
        output = step_tensors(problem, pose.to_tensor(), cfg)
    return (
        Pose.from_tensor(output.pose),
        Twist(output.step.numpy()),
        output.weights.numpy().copy(),
    )


def icp_solve(
    source: PointCloud, target: PointCloud, initial: Pose, cfg: IcpConfig
) -> IcpResult:
    """Iterate icp_step from initial until convergence or max_iterations"""
    check_inputs(source, target, initial, cfg)
    problem = IcpProblem.from_clouds(source, build_index(target))
    with torch.no_grad():
        trace = iterate(problem, initial.to_tensor(), cfg, cfg.max_iterations)
    return result_from_trace(problem, trace, cfg)


def load_pose_json(path) -> Pose:
    return Pose.from_dict(load_json_document(path))


class IcpComponent:
    """``dicp icp``: register two CSV clouds and write the result JSON"""

    def __init__(self, settings: Dict[str, Any]):
        self.settings = settings

    @staticmethod
    def add_arguments(parser) -> None:
        parser.add_argument("--source", required=True, help="source pointcloud CSV")
        parser.add_argument("--target", required=True, help="target pointcloud CSV")
        parser.add_argument("--init", help="initial pose JSON (identity if omitted)")
        parser.add_argument("--max-iterations", type=int, dest="max_iterations")
        parser.add_argument("--out", required=True, help="result JSON path")

    def build_config(self, args) -> IcpConfig:
        document = dict(self.settings.get("icp", self.settings))
        if getattr(args, "max_iterations", None) is not None:
            document["max_iterations"] = args.max_iterations
        return IcpConfig.from_dict(document)

    def run(self, args) -> IcpResult:
        cfg = self.build_config(args)
        source = load_pointcloud_csv(args.source)
        target = load_pointcloud_csv(args.target)
        initial = load_pose_json(args.init) if args.init else Pose.identity(source.dim)
        logger.info(
            "Registering %d source points against %d target points",
            source.size,
            target.size,
        )
        result = icp_solve(source, target, initial, cfg)
        logger.info(
            "Finished after %d iterations (converged=%s, J=%.6g)",
            result.iterations_run,
            result.converged,
            result.objective,
        )
        write_json_document(result.to_dict(), args.out)
        return result
