# dicp_components/scene.py
"""Synthetic localisation scenes: a structural map plus a noisy scan of it.

All SceneSpec geometry (walls, posts, noise box, vehicles) is given in the
map frame. The scan cloud is that geometry moved into the sensor frame with
the inverse of the groundtruth pose, so ``T_gt`` maps sensor points onto
the map.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from typing_extensions import Self

from .config import load_json_document, require_positive
from .errors import ConfigError
from .pointcloud import PointCloud
from .radar_extract import PolarScan
from .se_geometry import Pose, Twist, exp_map, inverse, transform_points

logger = logging.getLogger(__name__)

STRUCTURE = "structure"
NOISE = "noise"
VEHICLE = "vehicle"


@dataclass(frozen=True)
class WallSpec:
    start: Tuple[float, float]
    end: Tuple[float, float]
    spacing: float = 0.5

    def __post_init__(self):
        require_positive("wall spacing", self.spacing)

    def points(self) -> np.ndarray:
        start = np.asarray(self.start, dtype=np.float64)
        end = np.asarray(self.end, dtype=np.float64)
        count = int(math.floor(np.linalg.norm(end - start) / self.spacing)) + 1
        steps = np.linspace(0.0, 1.0, count)[:, None] if count > 1 else np.zeros((1, 1))
        return start + steps * (end - start)


@dataclass(frozen=True)
class PostSpec:
    center: Tuple[float, float]
    count: int = 8
    radius: float = 0.2

    def __post_init__(self):
        if int(self.count) < 0:
            raise ConfigError(f"Post point count must be >= 0, got {self.count}")
        require_positive("post radius", self.radius, allow_zero=True)

    def points(self) -> np.ndarray:
        center = np.asarray(self.center, dtype=np.float64)
        count = int(self.count)
        if count <= 1:
            return np.tile(center, (count, 1))
        angles = np.arange(count) * (2.0 * math.pi / count)
        return center + self.radius * np.column_stack([np.cos(angles), np.sin(angles)])


@dataclass(frozen=True)
class VehicleCluster:
    """Box of points present in the scan but absent from the map"""

    center: Tuple[float, float]
    extent: Tuple[float, float] = (4.5, 1.8)
    count: int = 30

    def __post_init__(self):
        if int(self.count) < 0:
            raise ConfigError(f"Vehicle point count must be >= 0, got {self.count}")
        for side in self.extent:
            require_positive("vehicle extent", side, allow_zero=True)


@dataclass(frozen=True)
class ScanRendering:
    range_resolution: float = 0.25
    azimuth_count: int = 400
    max_range: float = 60.0
    background: float = 1.0
    peak: float = 100.0

    def __post_init__(self):
        require_positive("range_resolution", self.range_resolution)
        require_positive("max_range", self.max_range)
        require_positive("background", self.background, allow_zero=True)
        require_positive("peak", self.peak)
        if int(self.azimuth_count) < 1:
            raise ConfigError(f"azimuth_count must be >= 1, got {self.azimuth_count}")

    @property
    def range_bins(self) -> int:
        return int(math.ceil(self.max_range / self.range_resolution))


@dataclass(frozen=True)
class SceneSpec:
    walls: Tuple[WallSpec, ...] = ()
    posts: Tuple[PostSpec, ...] = ()
    noise_points: int = 0
    noise_bound: float = 20.0
    vehicle_clusters: Tuple[VehicleCluster, ...] = ()
    seed: int = 0
    sensor_noise_sigma: float = 0.0
    gt_twist: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    rendering: ScanRendering = field(default_factory=ScanRendering)

    def __post_init__(self):
        if int(self.noise_points) < 0:
            raise ConfigError(f"noise_points must be >= 0, got {self.noise_points}")
        require_positive("noise_bound", self.noise_bound)
        require_positive("sensor_noise_sigma", self.sensor_noise_sigma, allow_zero=True)
        if len(self.gt_twist) != 3:
            raise ConfigError("gt_twist must be a 2D twist (x, y, heading)")
        object.__setattr__(self, "walls", tuple(self.walls))
        object.__setattr__(self, "posts", tuple(self.posts))
        object.__setattr__(self, "vehicle_clusters", tuple(self.vehicle_clusters))

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        document = dict(document)
        unknown = set(document) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown SceneSpec keys: {sorted(unknown)}")
        document["walls"] = tuple(WallSpec(**w) for w in document.get("walls", ()))
        document["posts"] = tuple(PostSpec(**p) for p in document.get("posts", ()))
        document["vehicle_clusters"] = tuple(
            VehicleCluster(**v) for v in document.get("vehicle_clusters", ())
        )
        if "rendering" in document:
            document["rendering"] = ScanRendering(**document["rendering"])
        if "gt_twist" in document:
            document["gt_twist"] = tuple(document["gt_twist"])
        return cls(**document)


@dataclass
class Scene:
    spec: SceneSpec
    map: PointCloud
    scan_source: PointCloud
    T_gt: Pose
    scan: PolarScan
    labels: np.ndarray

    def as_tuple(self) -> Tuple[PointCloud, PointCloud, Pose, PolarScan]:
        return self.map, self.scan_source, self.T_gt, self.scan


def render_scan(points: np.ndarray, rendering: ScanRendering) -> PolarScan:
    """Constant background with one impulse per in-range point"""
    bins = rendering.range_bins
    azimuths = int(rendering.azimuth_count)
    intensities = np.full((azimuths, bins), float(rendering.background))

    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    rho = np.hypot(points[:, 0], points[:, 1])
    theta = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * math.pi)
    row = np.mod(np.rint(theta / (2.0 * math.pi / azimuths)).astype(np.int64), azimuths)
    col = np.floor(rho / rendering.range_resolution).astype(np.int64)
    keep = col < bins
    intensities[row[keep], col[keep]] = rendering.peak
    return PolarScan.uniform_azimuths(intensities, rendering.range_resolution)


def generate_scene(spec: SceneSpec) -> Scene:
    """Map, sensor-frame scan cloud, groundtruth and rendered scan; seeded"""
    blocks = [wall.points() for wall in spec.walls]
    blocks += [post.points() for post in spec.posts]
    structure = np.vstack(blocks) if blocks else np.zeros((0, 2))
    if structure.shape[0] == 0:
        raise ConfigError("Scene has no structural points (walls or posts)")

    rng = np.random.default_rng(spec.seed)
    T_gt = exp_map(Twist(np.asarray(spec.gt_twist, dtype=np.float64)))
    to_sensor = inverse(T_gt)

    observed = transform_points(to_sensor, structure)
    if spec.sensor_noise_sigma > 0.0:
        observed = observed + rng.normal(0.0, spec.sensor_noise_sigma, observed.shape)

    extra: List[np.ndarray] = []
    labels = [STRUCTURE] * structure.shape[0]
    if spec.noise_points:
        bound = spec.noise_bound
        clutter = rng.uniform(-bound, bound, (int(spec.noise_points), 2))
        extra.append(transform_points(to_sensor, clutter))
        labels += [NOISE] * int(spec.noise_points)
    for vehicle in spec.vehicle_clusters:
        half = 0.5 * np.asarray(vehicle.extent, dtype=np.float64)
        body = np.asarray(vehicle.center, dtype=np.float64) + rng.uniform(
            -half, half, (int(vehicle.count), 2)
        )
        extra.append(transform_points(to_sensor, body))
        labels += [VEHICLE] * int(vehicle.count)

    source_points = np.vstack([observed] + extra)
    scene = Scene(
        spec=spec,
        map=PointCloud(structure, frame_id="map"),
        scan_source=PointCloud(source_points, frame_id="sensor"),
        T_gt=T_gt,
        scan=render_scan(source_points, spec.rendering),
        labels=np.asarray(labels),
    )
    logger.debug(
        "Generated scene: %d map points, %d scan points",
        scene.map.size,
        scene.scan_source.size,
    )
    return scene


def standard_scene_spec(seed: int = 0, sensor_noise_sigma: float = 0.05) -> SceneSpec:
    """Corridor of walls and posts with 100 clutter points and one vehicle"""
    rng = np.random.default_rng(seed)
    twist = (
        rng.uniform(-2.0, 2.0),
        rng.uniform(-2.0, 2.0),
        rng.uniform(-math.pi, math.pi) * 0.9,
    )
    return SceneSpec(
        walls=(
            WallSpec((-20.0, -8.0), (20.0, -8.0), 0.5),
            WallSpec((-20.0, 9.0), (12.0, 9.0), 0.5),
            WallSpec((12.0, 9.0), (12.0, 20.0), 0.5),
            WallSpec((-20.0, -8.0), (-20.0, 9.0), 0.5),
        ),
        posts=(
            PostSpec((5.0, -4.0), 8),
            PostSpec((-6.0, 4.5), 8),
            PostSpec((16.0, 2.0), 8),
        ),
        noise_points=100,
        noise_bound=20.0,
        vehicle_clusters=(VehicleCluster((0.0, 1.5), (4.5, 1.8), 30),),
        seed=seed,
        sensor_noise_sigma=sensor_noise_sigma,
        gt_twist=twist,
    )


def standard_suite(count: int, seed: int = 0) -> List[SceneSpec]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [standard_scene_spec(int(s)) for s in seeds]


def load_scene_specs(path) -> List[SceneSpec]:
    """Read scene specs from JSON.

    The document is either {"scenes": [...]} or
    {"standard_suite": {"count": N, "seed": S}}.
    """
    document = load_json_document(path)
    if "standard_suite" in document:
        suite = document["standard_suite"]
        return standard_suite(int(suite.get("count", 1)), int(suite.get("seed", 0)))
    scenes: Sequence[Dict[str, Any]] = document.get("scenes", [])
    if not scenes:
        raise ConfigError(f"{path}: no scenes defined")
    return [SceneSpec.from_dict(scene) for scene in scenes]
