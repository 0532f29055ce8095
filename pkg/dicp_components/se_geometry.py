# dicp_components/se_geometry.py
"""Rigid-body transforms in SE(2) and SE(3).

The tensor functions (``*_tensor``) are the single implementation of the
exponential and logarithmic maps. They run on float64 torch tensors so the
differentiable solver can record them; the numpy-facing ``Pose`` / ``Twist``
API converts at the boundary.

Twists are ordered translation first: (x, y, phi) in 2D and
(x, y, z, wx, wy, wz) in 3D.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict

import numpy as np
import torch
from typing_extensions import Self

from .errors import DataError, DimensionMismatchError, SingularityError

# Below this angle the left-Jacobian coefficients switch to Taylor series
SMALL_ANGLE = 1e-7
# Angles closer than this to +/- pi are rejected by the logarithmic map
SINGULARITY_MARGIN = 1e-9
ORTHONORMAL_TOL = 1e-9

TWIST_SIZE = {2: 3, 3: 6}


def _twist_dim(length: int) -> int:
    for dim, size in TWIST_SIZE.items():
        if size == length:
            return dim
    raise DimensionMismatchError(f"Twist must have 3 or 6 entries, got {length}")


# ---------------------------------------------------------------------------
# tensor level


def hat_so3(w: torch.Tensor) -> torch.Tensor:
    """Skew-symmetric matrix of a 3-vector"""
    zero = torch.zeros((), dtype=w.dtype)
    return torch.stack(
        [
            torch.stack([zero, -w[2], w[1]]),
            torch.stack([w[2], zero, -w[0]]),
            torch.stack([-w[1], w[0], zero]),
        ]
    )


def _homogeneous(rotation: torch.Tensor, translation: torch.Tensor) -> torch.Tensor:
    dim = rotation.shape[0]
    top = torch.cat([rotation, translation.reshape(dim, 1)], dim=1)
    bottom = torch.zeros((1, dim + 1), dtype=rotation.dtype)
    bottom[0, dim] = 1.0
    return torch.cat([top, bottom], dim=0)


def _se2_coefficients(theta: torch.Tensor):
    """sin(t)/t and (1 - cos(t))/t with a Taylor branch near zero"""
    small = theta.abs() < SMALL_ANGLE
    safe = torch.where(small, torch.ones_like(theta), theta)
    a = torch.where(small, 1.0 - theta**2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(
        small,
        theta / 2.0 - theta**3 / 24.0,
        2.0 * torch.sin(safe / 2.0) ** 2 / safe,
    )
    return a, b


def _se3_coefficients(theta_sq: torch.Tensor):
    """Rodrigues coefficients A, B, C and the safe angle"""
    small = theta_sq < SMALL_ANGLE**2
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(
        small,
        0.5 - theta_sq / 24.0,
        2.0 * torch.sin(theta / 2.0) ** 2 / safe_sq,
    )
    c = torch.where(
        small,
        1.0 / 6.0 - theta_sq / 120.0,
        (theta - torch.sin(theta)) / (safe_sq * theta),
    )
    return a, b, c, small, theta


def exp_se2_tensor(xi: torch.Tensor) -> torch.Tensor:
    rho, theta = xi[:2], xi[2]
    c, s = torch.cos(theta), torch.sin(theta)
    rotation = torch.stack([torch.stack([c, -s]), torch.stack([s, c])])
    a, b = _se2_coefficients(theta)
    left_jacobian = torch.stack([torch.stack([a, -b]), torch.stack([b, a])])
    return _homogeneous(rotation, left_jacobian @ rho)


def exp_se3_tensor(xi: torch.Tensor) -> torch.Tensor:
    rho, w = xi[:3], xi[3:]
    a, b, c, _, _ = _se3_coefficients(torch.dot(w, w))
    eye = torch.eye(3, dtype=xi.dtype)
    wx = hat_so3(w)
    wx2 = wx @ wx
    rotation = eye + a * wx + b * wx2
    left_jacobian = eye + b * wx + c * wx2
    return _homogeneous(rotation, left_jacobian @ rho)


def exp_tensor(xi: torch.Tensor) -> torch.Tensor:
    """Homogeneous matrix exp(xi^) for a 3- or 6-entry twist tensor"""
    if _twist_dim(xi.shape[0]) == 2:
        return exp_se2_tensor(xi)
    return exp_se3_tensor(xi)


def _check_angle(theta: torch.Tensor) -> None:
    angle = float(theta.detach().abs())
    if angle > math.pi - SINGULARITY_MARGIN:
        raise SingularityError(
            f"Rotation angle {angle:.12f} rad is at the +/-pi singularity"
        )


def log_se2_tensor(matrix: torch.Tensor) -> torch.Tensor:
    theta = torch.atan2(matrix[1, 0], matrix[0, 0])
    _check_angle(theta)
    a, b = _se2_coefficients(theta)
    scale = 1.0 / (a**2 + b**2)
    inverse_jacobian = scale * torch.stack(
        [torch.stack([a, b]), torch.stack([-b, a])]
    )
    rho = inverse_jacobian @ matrix[:2, 2]
    return torch.cat([rho, theta.reshape(1)])


def log_se3_tensor(matrix: torch.Tensor) -> torch.Tensor:
    rotation, translation = matrix[:3, :3], matrix[:3, 3]
    sin_axis = 0.5 * torch.stack(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    )
    cos_theta = torch.clamp((torch.trace(rotation) - 1.0) / 2.0, -1.0, 1.0)
    sin_sq = torch.dot(sin_axis, sin_axis)
    positive = sin_sq > 0
    sin_theta = torch.where(
        positive,
        torch.sqrt(torch.where(positive, sin_sq, torch.ones_like(sin_sq))),
        torch.zeros_like(sin_sq),
    )
    theta = torch.atan2(sin_theta, cos_theta)
    _check_angle(theta)

    small = theta < SMALL_ANGLE
    safe_sin = torch.where(small, torch.ones_like(sin_theta), sin_theta)
    factor = torch.where(small, 1.0 + theta**2 / 6.0, theta / safe_sin)
    w = sin_axis * factor

    a, b, _, small_sq, _ = _se3_coefficients(theta**2)
    safe_sq = torch.where(small_sq, torch.ones_like(theta), theta**2)
    d = torch.where(
        small_sq,
        1.0 / 12.0 + theta**2 / 720.0,
        (1.0 - a / (2.0 * b)) / safe_sq,
    )
    wx = hat_so3(w)
    inverse_jacobian = torch.eye(3, dtype=matrix.dtype) - 0.5 * wx + d * (wx @ wx)
    return torch.cat([inverse_jacobian @ translation, w])


def log_tensor(matrix: torch.Tensor) -> torch.Tensor:
    """Twist tensor log(T)^vee for a 3x3 or 4x4 homogeneous matrix"""
    if matrix.shape[0] == 3:
        return log_se2_tensor(matrix)
    if matrix.shape[0] == 4:
        return log_se3_tensor(matrix)
    raise DimensionMismatchError(f"Unsupported transform shape {tuple(matrix.shape)}")


def inverse_tensor(matrix: torch.Tensor) -> torch.Tensor:
    dim = matrix.shape[0] - 1
    rotation_t = matrix[:dim, :dim].transpose(0, 1)
    return _homogeneous(rotation_t, -rotation_t @ matrix[:dim, dim])


def transform_tensor(matrix: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Apply a homogeneous transform to an (n, D) tensor of points"""
    dim = matrix.shape[0] - 1
    return points @ matrix[:dim, :dim].transpose(0, 1) + matrix[:dim, dim]


def pose_error_tensor(
    estimate: torch.Tensor, groundtruth: torch.Tensor
) -> torch.Tensor:
    return log_tensor(estimate @ inverse_tensor(groundtruth))


# ---------------------------------------------------------------------------
# value types


def _to_tensor(array) -> torch.Tensor:
    return torch.from_numpy(np.array(array, dtype=np.float64))


@dataclass(frozen=True)
class Twist:
    """Tangent-space coordinates of a rigid transform"""

    vector: np.ndarray

    def __post_init__(self):
        vector = np.array(self.vector, dtype=np.float64).reshape(-1)
        _twist_dim(vector.shape[0])
        if not np.all(np.isfinite(vector)):
            raise DataError(f"Twist entries must be finite, got {vector}")
        vector.setflags(write=False)
        object.__setattr__(self, "vector", vector)

    @property
    def dim(self) -> int:
        return _twist_dim(self.vector.shape[0])

    @property
    def translation(self) -> np.ndarray:
        return self.vector[: self.dim]

    @property
    def rotation(self) -> np.ndarray:
        return self.vector[self.dim :]

    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))

    @classmethod
    def zero(cls, dim: int) -> Self:
        return cls(np.zeros(TWIST_SIZE[dim]))


@dataclass(frozen=True)
class Pose:
    """Rigid transform with an orthonormal rotation and a translation in meters"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        dim = translation.shape[0]
        if dim not in (2, 3) or rotation.shape != (dim, dim):
            raise DimensionMismatchError(
                f"Pose needs a DxD rotation and D translation with D in (2, 3), "
                f"got {rotation.shape} and {translation.shape}"
            )
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise DataError("Pose entries must be finite")
        if np.max(np.abs(rotation @ rotation.T - np.eye(dim))) > ORTHONORMAL_TOL:
            raise DataError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise DataError("Pose rotation must have determinant +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @property
    def dim(self) -> int:
        return self.translation.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(self.dim + 1)
        out[: self.dim, : self.dim] = self.rotation
        out[: self.dim, self.dim] = self.translation
        return out

    @property
    def heading(self) -> float:
        """Planar rotation angle (2D poses, or the yaw of a 3D pose)"""
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def to_tensor(self) -> torch.Tensor:
        return _to_tensor(self.matrix)

    @classmethod
    def identity(cls, dim: int = 2) -> Self:
        return cls(np.eye(dim), np.zeros(dim))

    @classmethod
    def from_matrix(cls, matrix) -> Self:
        matrix = np.asarray(matrix, dtype=np.float64)
        dim = matrix.shape[0] - 1
        return cls(matrix[:dim, :dim], matrix[:dim, dim])

    @classmethod
    def from_tensor(cls, matrix: torch.Tensor) -> Self:
        return cls.from_matrix(matrix.detach().cpu().numpy())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dim": self.dim,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        try:
            dim = int(document["dim"])
            rotation = np.asarray(document["rotation"], dtype=np.float64)
            translation = np.asarray(document["translation"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Malformed pose document: {e}") from e
        if dim not in (2, 3) or rotation.size != dim * dim:
            raise DataError(f"Malformed pose document for dim={dim}")
        return cls(rotation.reshape(dim, dim), translation)

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return self.dim == other.dim and bool(
            np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol)
        )


def _check_same_dim(a: Pose, b: Pose) -> None:
    if a.dim != b.dim:
        raise DimensionMismatchError(f"Cannot combine {a.dim}D and {b.dim}D poses")


def exp_map(xi: Twist) -> Pose:
    return Pose.from_tensor(exp_tensor(_to_tensor(xi.vector)))


def log_map(pose: Pose) -> Twist:
    return Twist(log_tensor(pose.to_tensor()).numpy())


def compose(a: Pose, b: Pose) -> Pose:
    _check_same_dim(a, b)
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rotation_t = a.rotation.T
    return Pose(rotation_t, -rotation_t @ a.translation)


def transform_points(pose: Pose, points) -> np.ndarray:
    """rotation . p + translation for every row of points"""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != pose.dim:
        raise DimensionMismatchError(
            f"Points of shape {points.shape} do not match a {pose.dim}D pose"
        )
    return points @ pose.rotation.T + pose.translation


def pose_error(estimate: Pose, groundtruth: Pose) -> Twist:
    """log(estimate . groundtruth^-1)^vee"""
    _check_same_dim(estimate, groundtruth)
    return log_map(compose(estimate, inverse(groundtruth)))


def planar_pose(x: float, y: float, heading: float) -> Pose:
    """2D pose from a translation and a heading in radians"""
    c, s = math.cos(heading), math.sin(heading)
    return Pose(np.array([[c, -s], [s, c]]), np.array([x, y]))
