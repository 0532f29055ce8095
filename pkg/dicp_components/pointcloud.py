# dicp_components/pointcloud.py
"""Pointcloud container, exact nearest-neighbour index and normal estimation."""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from typing_extensions import Self

from .errors import ConfigError, DataError, DimensionMismatchError, EmptyCloudError
from .se_geometry import Pose, transform_points

logger = logging.getLogger(__name__)

NORMAL_TOL = 1e-6
# Candidates fetched per query so equidistant targets can be tie-broken
TIE_CANDIDATES = 4
DEGENERATE_COVARIANCE = 1e-24

COORD_COLUMNS = {2: ["x", "y"], 3: ["x", "y", "z"]}
NORMAL_COLUMNS = {2: ["nx", "ny"], 3: ["nx", "ny", "nz"]}
WEIGHT_COLUMN = "weight"


@dataclass(frozen=True)
class PointCloud:
    """Ordered point set with optional unit normals and prior weights.

    A normal of all zeros marks a point whose neighbourhood was degenerate;
    such points are excluded from point-to-plane solves.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    prior_weights: Optional[np.ndarray] = None
    frame_id: str = ""

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim == 1 and points.size == 0:
            points = points.reshape(0, 2)
        if points.ndim != 2 or points.shape[1] not in (2, 3):
            raise DimensionMismatchError(
                f"Points must be an (n, 2) or (n, 3) array, got {points.shape}"
            )
        if not np.all(np.isfinite(points)):
            raise DataError("Point coordinates must be finite")
        object.__setattr__(self, "points", points)

        if self.normals is not None:
            normals = np.array(self.normals, dtype=np.float64)
            if normals.shape != points.shape:
                raise DimensionMismatchError(
                    f"Normals shape {normals.shape} "
                    f"does not match points {points.shape}"
                )
            norms = np.linalg.norm(normals, axis=1)
            unit = np.abs(norms - 1.0) <= NORMAL_TOL
            if not np.all(unit | (norms == 0.0)):
                raise DataError("Normals must have unit norm (or be all zero)")
            object.__setattr__(self, "normals", normals)

        if self.prior_weights is not None:
            weights = np.array(self.prior_weights, dtype=np.float64).reshape(-1)
            if weights.shape[0] != points.shape[0]:
                raise DimensionMismatchError(
                    f"{weights.shape[0]} prior weights for {points.shape[0]} points"
                )
            if not np.all(np.isfinite(weights)) or np.any(
                (weights < 0.0) | (weights > 1.0)
            ):
                raise DataError("Prior weights must lie in [0, 1]")
            object.__setattr__(self, "prior_weights", weights)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def normal_valid(self) -> np.ndarray:
        if self.normals is None:
            return np.zeros(self.size, dtype=bool)
        return np.linalg.norm(self.normals, axis=1) > 0.5

    def weights_or_ones(self) -> np.ndarray:
        if self.prior_weights is None:
            return np.ones(self.size)
        return self.prior_weights

    def with_prior_weights(self, weights) -> Self:
        return replace(self, prior_weights=weights)

    def transformed(self, pose: Pose) -> Self:
        """Move points (and rotate normals) by pose"""
        normals = None if self.normals is None else self.normals @ pose.rotation.T
        return replace(
            self, points=transform_points(pose, self.points), normals=normals
        )

    def subset(self, selector) -> Self:
        normals = None if self.normals is None else self.normals[selector]
        weights = None if self.prior_weights is None else self.prior_weights[selector]
        return replace(
            self, points=self.points[selector], normals=normals, prior_weights=weights
        )

    @classmethod
    def empty(cls, dim: int = 2, frame_id: str = "") -> Self:
        return cls(np.zeros((0, dim)), frame_id=frame_id)


class NnIndex:
    """Exact L2 nearest-neighbour index over a target cloud.

    Ties are broken towards the lowest target index. The index is immutable
    after construction and safe to query from several threads.
    """

    def __init__(self, target: PointCloud):
        if target.size < 1:
            raise EmptyCloudError(
                "Cannot build a nearest-neighbour index on an empty cloud"
            )
        self.target = target
        self._tree = cKDTree(target.points)

    @property
    def target_size(self) -> int:
        return self.target.size

    @property
    def dim(self) -> int:
        return self.target.dim

    def query(self, points) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest target index and distance for every row of points"""
        points = np.asarray(points, dtype=np.float64).reshape(-1, self.dim)
        k = min(self.target_size, TIE_CANDIDATES)
        distances, indices = self._tree.query(points, k=k)
        distances = np.asarray(distances).reshape(points.shape[0], k)
        indices = np.asarray(indices).reshape(points.shape[0], k)

        tied = distances == distances[:, :1]
        best = np.where(tied, indices, self.target_size).min(axis=1)
        if k < self.target_size:
            # every candidate tied: more equidistant targets may lie beyond k
            for row in np.flatnonzero(tied.all(axis=1)):
                ball = self._tree.query_ball_point(points[row], distances[row, 0])
                if ball:
                    best[row] = min(ball)
        return best.astype(np.int64), distances[:, 0]


def build_index(target: PointCloud) -> NnIndex:
    return NnIndex(target)


def nearest(index: NnIndex, point) -> Tuple[int, float]:
    indices, distances = index.query(np.asarray(point, dtype=np.float64).reshape(1, -1))
    return int(indices[0]), float(distances[0])


def estimate_normals(cloud: PointCloud, k: int = 8, viewpoint=None) -> PointCloud:
    """Per-point normals from the k-NN covariance.

    The normal is the eigenvector of the smallest eigenvalue, oriented so it
    points towards the viewpoint (the sensor origin by default). Points with
    a zero covariance get an all-zero (flagged) normal.
    """
    dim = cloud.dim
    if k < dim:
        raise ConfigError(f"Normal estimation needs k >= {dim}, got {k}")
    if cloud.size <= k:
        raise DataError(
            f"Normal estimation needs more than {k} points, got {cloud.size}"
        )

    viewpoint = np.zeros(dim) if viewpoint is None else np.asarray(viewpoint, float)
    _, neighbours = cKDTree(cloud.points).query(cloud.points, k=k)
    patches = cloud.points[neighbours]
    centered = patches - patches.mean(axis=1, keepdims=True)
    covariance = np.einsum("nki,nkj->nij", centered, centered) / k

    _, eigenvectors = np.linalg.eigh(covariance)
    normals = eigenvectors[:, :, 0].copy()
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    flip = np.einsum("ni,ni->n", normals, viewpoint - cloud.points) < 0.0
    normals[flip] *= -1.0

    degenerate = np.trace(covariance, axis1=1, axis2=2) <= DEGENERATE_COVARIANCE
    if np.any(degenerate):
        logger.debug("Flagged %d degenerate normals", int(degenerate.sum()))
        normals[degenerate] = 0.0
    return replace(cloud, normals=normals)


def _columns_for(dim: int, with_normals: bool, with_weights: bool):
    columns = list(COORD_COLUMNS[dim])
    if with_normals:
        columns += NORMAL_COLUMNS[dim]
    if with_weights:
        columns.append(WEIGHT_COLUMN)
    return columns


def load_pointcloud_csv(path, frame_id: str = "") -> PointCloud:
    """Read a pointcloud CSV with header x,y[,z][,nx,ny[,nz]][,weight]"""
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"Pointcloud file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"Pointcloud file {path} is empty") from None

    columns = [c.strip() for c in frame.columns]
    dim = 3 if "z" in columns else 2
    with_normals = "nx" in columns
    with_weights = WEIGHT_COLUMN in columns
    expected = _columns_for(dim, with_normals, with_weights)
    if columns != expected:
        raise DataError(f"{path}: header {columns} does not match {expected}")

    values = frame.apply(lambda col: pd.to_numeric(col, errors="coerce")).to_numpy(
        dtype=np.float64
    )
    bad_rows = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad_rows.size:
        # header is line 1
        line = int(bad_rows[0]) + 2
        raise DataError(f"{path}: non-finite or non-numeric value on line {line}")

    normals = values[:, dim : 2 * dim] if with_normals else None
    weights = values[:, -1] if with_weights else None
    return PointCloud(values[:, :dim], normals, weights, frame_id or path.stem)


def save_pointcloud_csv(cloud: PointCloud, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks = [cloud.points]
    if cloud.normals is not None:
        blocks.append(cloud.normals)
    if cloud.prior_weights is not None:
        blocks.append(cloud.prior_weights.reshape(-1, 1))
    columns = _columns_for(
        cloud.dim, cloud.normals is not None, cloud.prior_weights is not None
    )
    data = np.hstack(blocks) if cloud.size else np.zeros((0, len(columns)))
    pd.DataFrame(data, columns=columns).to_csv(path, index=False, encoding="utf-8")
    return path
