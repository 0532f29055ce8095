# dicp_components/mask_weighting.py
"""Weight masks: bilinear point sampling, supervisory map masks and losses.

Pixel (row i, column j) of a W x W mask has its center at
x = (j - W//2) * pixel_size, y = (i - W//2) * pixel_size in the sensor
frame, so the sensor origin sits on the center of pixel (W//2, W//2).
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy import sparse
from typing_extensions import Self

from .config import require_positive
from .errors import ConfigError, DataError, DimensionMismatchError
from .pointcloud import PointCloud
from .se_geometry import Pose, Twist, inverse, transform_points

BCE_EPS = 1e-7
MASK_MAXVAL = 65535
# 8-bit and 16-bit grayscale as Pillow reports them
MASK_MODES = ("L", "I;16", "I")


@dataclass(frozen=True)
class MaskGeometry:
    width: int = 256
    pixel_size: float = 0.25

    def __post_init__(self):
        if int(self.width) < 2:
            raise ConfigError(f"Mask width must be >= 2 pixels, got {self.width}")
        object.__setattr__(self, "width", int(self.width))
        require_positive("pixel_size", self.pixel_size)

    @property
    def center(self) -> int:
        return self.width // 2

    @property
    def half_extent(self) -> float:
        """Distance from the sensor to the nearest mask edge pixel center"""
        return (self.width - 1 - self.center) * self.pixel_size

    def to_dict(self) -> Dict[str, Any]:
        return {"width": self.width, "pixel_size": float(self.pixel_size)}

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        return cls(**document)


@dataclass(frozen=True)
class WeightMask:
    """Square grid of per-location reliabilities in [0, 1]"""

    values: np.ndarray
    pixel_size: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        square = values.ndim == 2 and values.shape[0] == values.shape[1]
        if not square or values.shape[0] < 2:
            raise DimensionMismatchError(
                f"Mask must be a square W x W grid, got {values.shape}"
            )
        if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
            raise DataError("Mask values must lie in [0, 1]")
        require_positive("pixel_size", self.pixel_size)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return self.values.shape[0]

    @property
    def geometry(self) -> MaskGeometry:
        return MaskGeometry(self.width, self.pixel_size)

    def normalized(self) -> Self:
        """Scale so the maximum is one; all-zero masks stay zero"""
        peak = self.values.max()
        if peak <= 0.0:
            return self
        return WeightMask(self.values / peak, self.pixel_size)

    @classmethod
    def constant(cls, geometry: MaskGeometry, value: float = 1.0) -> Self:
        return cls(
            np.full((geometry.width, geometry.width), value), geometry.pixel_size
        )


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            require_positive(name, getattr(self, name), allow_zero=True)

    def to_dict(self) -> Dict[str, Any]:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        return cls(**document)


@dataclass(frozen=True)
class LossBreakdown:
    l_icp: float
    l_bce: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)


def _planar_points(points: Union[PointCloud, np.ndarray]) -> np.ndarray:
    if isinstance(points, PointCloud):
        points = points.points
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise DimensionMismatchError(
            f"Mask sampling needs 2D points, got {points.shape}"
        )
    return points


def sampling_jacobian(mask: WeightMask, points) -> sparse.csr_matrix:
    """Sparse (n, W*W) matrix B with sample_weights = B @ mask.values.ravel().

    Rows of interior points hold the four bilinear coefficients; rows of
    points outside the mask extent are empty.
    """
    points = _planar_points(points)
    width = mask.width
    center = width // 2
    cols = points[:, 0] / mask.pixel_size + center
    rows = points[:, 1] / mask.pixel_size + center
    inside = (cols >= 0) & (cols <= width - 1) & (rows >= 0) & (rows <= width - 1)

    point_ids = np.flatnonzero(inside)
    col0 = np.clip(np.floor(cols[inside]), 0, width - 2).astype(np.int64)
    row0 = np.clip(np.floor(rows[inside]), 0, width - 2).astype(np.int64)
    fc = cols[inside] - col0
    fr = rows[inside] - row0

    coefficients = [
        ((1.0 - fc) * (1.0 - fr), row0, col0),
        (fc * (1.0 - fr), row0, col0 + 1),
        ((1.0 - fc) * fr, row0 + 1, col0),
        (fc * fr, row0 + 1, col0 + 1),
    ]
    data = np.concatenate([c[0] for c in coefficients])
    row_index = np.tile(point_ids, 4)
    col_index = np.concatenate([c[1] * width + c[2] for c in coefficients])
    jacobian = sparse.csr_matrix(
        (data, (row_index, col_index)), shape=(points.shape[0], width * width)
    )
    jacobian.eliminate_zeros()
    return jacobian


def sample_weights(mask: WeightMask, points, return_jacobian: bool = False):
    """Bilinear mask value at every point; zero outside the mask extent"""
    jacobian = sampling_jacobian(mask, points)
    weights = jacobian @ mask.values.reshape(-1)
    if return_jacobian:
        return weights, jacobian
    return weights


def make_map_mask(
    map_cloud: PointCloud,
    T_gt: Pose,
    geometry: MaskGeometry,
    max_range: float,
) -> WeightMask:
    """Binary mask with ones at the pixels nearest to in-range map points.

    ``T_gt`` follows the scene convention and the ICP solve direction: it
    maps sensor-frame points into the map frame, the pose ICP recovers when
    aligning the scan onto the map. A map-to-sensor pose must be inverted
    before it is passed here. Map points are brought into the sensor frame
    with ``inverse(T_gt)``.
    """
    values = np.zeros((geometry.width, geometry.width))
    if map_cloud.size == 0:
        return WeightMask(values, geometry.pixel_size)

    local = transform_points(inverse(T_gt), map_cloud.points)
    local = local[np.linalg.norm(local, axis=1) <= max_range]
    cols = np.rint(local[:, 0] / geometry.pixel_size).astype(np.int64) + geometry.center
    rows = np.rint(local[:, 1] / geometry.pixel_size).astype(np.int64) + geometry.center
    keep = (cols >= 0) & (cols < geometry.width) & (rows >= 0) & (rows < geometry.width)
    values[rows[keep], cols[keep]] = 1.0
    return WeightMask(values, geometry.pixel_size)


def bce_loss(mask: WeightMask, target: WeightMask, return_gradient: bool = False):
    """Mean binary cross-entropy of mask against target.

    Mask values are clamped to [eps, 1 - eps] before taking logs.
    """
    if mask.values.shape != target.values.shape or not math.isclose(
        mask.pixel_size, target.pixel_size
    ):
        raise DimensionMismatchError("Mask and target geometries differ")

    m = np.clip(mask.values, BCE_EPS, 1.0 - BCE_EPS)
    t = target.values
    loss = float(np.mean(-(t * np.log(m) + (1.0 - t) * np.log(1.0 - m))))
    if not return_gradient:
        return loss

    unclamped = (mask.values >= BCE_EPS) & (mask.values <= 1.0 - BCE_EPS)
    gradient = np.where(unclamped, (-t / m + (1.0 - t) / (1.0 - m)) / t.size, 0.0)
    return loss, gradient


def icp_loss_tensor(error: torch.Tensor, lw: LossWeights) -> torch.Tensor:
    if error.shape[0] != 3:
        raise DimensionMismatchError("The ICP loss is defined on 2D twists")
    return lw.alpha * (error[0] ** 2 + error[1] ** 2) + lw.beta * error[2] ** 2


def icp_loss(error: Twist, lw: LossWeights) -> float:
    """alpha * (e_x^2 + e_y^2) + beta * e_phi^2"""
    return float(
        icp_loss_tensor(torch.from_numpy(np.array(error.vector, dtype=np.float64)), lw)
    )


def total_loss(l_icp: float, l_bce: float, lw: LossWeights) -> LossBreakdown:
    values = (float(l_icp), float(l_bce))
    if not all(math.isfinite(v) for v in values):
        raise DataError(f"Loss terms must be finite, got {values}")
    return LossBreakdown(values[0], values[1], values[0] + lw.gamma * values[1], lw)


def label_weight_means(weights: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    """Mean sampled weight per point label"""
    weights = np.asarray(weights, dtype=np.float64)
    labels = np.asarray(labels)
    return {
        str(label): float(weights[labels == label].mean())
        for label in np.unique(labels)
    }


# ---------------------------------------------------------------------------
# persistence: 16-bit grayscale PNG plus a JSON sidecar


def _mask_paths(path) -> Tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".png", ".json"):
        path = path.with_suffix("")
    return path.with_suffix(".png"), path.with_suffix(".json")


def save_mask(mask: WeightMask, path) -> Path:
    image_path, json_path = _mask_paths(path)
    image_path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.rint(np.clip(mask.values, 0.0, 1.0) * MASK_MAXVAL)
    Image.fromarray(quantized.astype(np.uint16)).save(image_path, format="PNG")
    with json_path.open("w", encoding="utf-8") as handle:
        json.dump(
            {"pixel_size": mask.pixel_size, "width": mask.width}, handle, indent=2
        )
    return image_path


def load_mask(path) -> WeightMask:
    image_path, json_path = _mask_paths(path)
    try:
        with json_path.open("r", encoding="utf-8") as handle:
            sidecar = json.load(handle)
        with Image.open(image_path) as image:
            mode = image.mode
            raster = np.asarray(image, dtype=np.float64)
    except FileNotFoundError as e:
        raise DataError(f"Mask file missing: {e.filename}") from None
    except UnidentifiedImageError:
        raise DataError(f"{image_path} is not a readable image") from None

    if mode not in MASK_MODES:
        raise DataError(f"{image_path}: expected a grayscale mask, got mode {mode}")
    height, width = raster.shape
    if width != height or width != int(sidecar.get("width", width)):
        raise DataError(f"{image_path}: expected a square mask matching the sidecar")
    maxval = 255 if mode == "L" else MASK_MAXVAL
    return WeightMask(raster / maxval, float(sidecar["pixel_size"]))
