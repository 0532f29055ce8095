# dicp_components/radar_extract.py
"""Polar radar scans, CA-CFAR / BFAR point detection and Cartesian images.

Detection runs a 1D sliding window along range for every azimuth. The
background estimate Z is the mean of the training bins on both sides of the
cell under test (guard bins and the cell itself excluded); the window is
truncated at the scan edges. A cell is a detection when its intensity is
strictly above ``scale_a * Z + offset_b``.
"""

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd
from scipy import ndimage
from typing_extensions import Self

from .config import apply_overrides, require_positive, section
from .errors import ConfigError, DataError
from .pointcloud import PointCloud, save_pointcloud_csv

logger = logging.getLogger(__name__)

DETECTOR_KINDS = ("ca_cfar", "bfar")
SCAN_MAGIC = b"PSCN"
SCAN_HEADER = struct.Struct("<4sIId")
TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PolarScan:
    """A x R intensity grid: one row per azimuth, one column per range bin"""

    intensities: np.ndarray
    range_resolution: float
    azimuth_angles: np.ndarray
    timestamp: Optional[float] = None

    def __post_init__(self):
        intensities = np.array(self.intensities, dtype=np.float64)
        if intensities.ndim != 2 or 0 in intensities.shape:
            raise DataError(
                "Scan intensities must be a nonempty A x R grid, "
                f"got {intensities.shape}"
            )
        if not np.all(np.isfinite(intensities)) or np.any(intensities < 0.0):
            raise DataError("Scan intensities must be finite and >= 0")
        azimuths = np.array(self.azimuth_angles, dtype=np.float64).reshape(-1)
        if azimuths.shape[0] != intensities.shape[0]:
            raise DataError(
                f"{azimuths.shape[0]} azimuth angles "
                f"for {intensities.shape[0]} scan rows"
            )
        if np.any(azimuths < 0.0) or np.any(azimuths >= TWO_PI):
            raise DataError("Azimuth angles must lie in [0, 2*pi)")
        if np.any(np.diff(azimuths) <= 0.0):
            raise DataError("Azimuth angles must be strictly increasing")
        require_positive("range_resolution", self.range_resolution)
        object.__setattr__(self, "intensities", intensities)
        object.__setattr__(self, "azimuth_angles", azimuths)

    @property
    def azimuth_count(self) -> int:
        return self.intensities.shape[0]

    @property
    def range_bins(self) -> int:
        return self.intensities.shape[1]

    @property
    def max_range(self) -> float:
        return self.range_bins * self.range_resolution

    @classmethod
    def uniform_azimuths(cls, intensities, range_resolution: float, **kwargs) -> Self:
        """Scan whose A azimuths are evenly spaced from 0"""
        count = np.asarray(intensities).shape[0]
        return cls(
            intensities, range_resolution, np.arange(count) * (TWO_PI / count), **kwargs
        )


@dataclass(frozen=True)
class DetectorConfig:
    kind: str = "bfar"
    train_cells: int = 20
    guard_cells: int = 2
    scale_a: float = 1.0
    offset_b: float = 0.0
    min_range_bin: int = 0

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ConfigError(
                f"Unknown detector {self.kind!r}; use one of {DETECTOR_KINDS}"
            )
        if int(self.train_cells) < 1:
            raise ConfigError(f"train_cells must be >= 1, got {self.train_cells}")
        if int(self.guard_cells) < 0:
            raise ConfigError(f"guard_cells must be >= 0, got {self.guard_cells}")
        if int(self.min_range_bin) < 0:
            raise ConfigError(f"min_range_bin must be >= 0, got {self.min_range_bin}")
        require_positive("scale_a", self.scale_a)
        require_positive("offset_b", self.offset_b, allow_zero=True)
        for name in ("train_cells", "guard_cells", "min_range_bin"):
            object.__setattr__(self, name, int(getattr(self, name)))

    @property
    def window_length(self) -> int:
        return 2 * (self.train_cells + self.guard_cells) + 1

    @property
    def threshold_offset(self) -> float:
        # CA-CFAR is BFAR with no additive term
        return float(self.offset_b) if self.kind == "bfar" else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "train_cells": self.train_cells,
            "guard_cells": self.guard_cells,
            "scale_a": float(self.scale_a),
            "offset_b": float(self.offset_b),
            "min_range_bin": self.min_range_bin,
        }

    @classmethod
    def from_dict(cls, document: Dict[str, Any]) -> Self:
        unknown = set(document) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown DetectorConfig keys: {sorted(unknown)}")
        return cls(**document)


@dataclass(frozen=True)
class CartesianImage:
    """Square sensor-centred image; pixel (W//2, W//2) holds the sensor"""

    values: np.ndarray
    pixel_size: float

    @property
    def width(self) -> int:
        return self.values.shape[0]


def _window_sums(cumulative: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Sum and count of bins lo..hi (inclusive, clipped) for every row"""
    bins = cumulative.shape[1] - 1
    lo = np.clip(lo, 0, bins)
    hi = np.clip(hi + 1, 0, bins)
    hi = np.maximum(hi, lo)
    return cumulative[:, hi] - cumulative[:, lo], (hi - lo).astype(np.float64)


def background_level(intensities: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """Mean of the training bins around every cell, A x R"""
    intensities = np.asarray(intensities, dtype=np.float64)
    rows, bins = intensities.shape
    cumulative = np.zeros((rows, bins + 1))
    np.cumsum(intensities, axis=1, out=cumulative[:, 1:])

    cells = np.arange(bins)
    near = cfg.guard_cells + 1
    far = cfg.guard_cells + cfg.train_cells
    left_sum, left_count = _window_sums(cumulative, cells - far, cells - near)
    right_sum, right_count = _window_sums(cumulative, cells + near, cells + far)

    count = left_count + right_count
    with np.errstate(invalid="ignore", divide="ignore"):
        level = (left_sum + right_sum) / count
    # a cell with no training bins can never be a detection
    return np.where(count > 0, level, np.inf)


def detection_mask(scan: PolarScan, cfg: DetectorConfig) -> np.ndarray:
    if cfg.window_length >= scan.range_bins:
        raise ConfigError(
            f"Detector window of {cfg.window_length} bins needs more than "
            f"its length in range bins, got {scan.range_bins}"
        )
    background = background_level(scan.intensities, cfg)
    threshold = cfg.scale_a * background + cfg.threshold_offset
    passed = scan.intensities > threshold
    passed[:, : cfg.min_range_bin] = False
    return passed


def detect(scan: PolarScan, cfg: DetectorConfig) -> PointCloud:
    """Detected cells as a 2D sensor-frame cloud, azimuth-major then range"""
    azimuth_index, range_index = np.nonzero(detection_mask(scan, cfg))
    if azimuth_index.size == 0:
        logger.debug("No detections in scan")
        return PointCloud.empty(2)

    rho = (range_index + 0.5) * scan.range_resolution
    theta = scan.azimuth_angles[azimuth_index]
    points = np.column_stack([rho * np.cos(theta), rho * np.sin(theta)])
    logger.debug("Detected %d points with %s", points.shape[0], cfg.kind)
    return PointCloud(points)


def _azimuth_coordinate(scan: PolarScan, theta: np.ndarray) -> np.ndarray:
    """Fractional row index of each angle; row A wraps onto row 0"""
    first = scan.azimuth_angles[0]
    theta = np.where(theta < first, theta + TWO_PI, theta)
    knots = np.append(scan.azimuth_angles, first + TWO_PI)
    return np.interp(theta, knots, np.arange(knots.size, dtype=np.float64))


def polar_to_cartesian_image(
    scan: PolarScan, width: int, pixel_size: float
) -> CartesianImage:
    """Bilinear resampling of the polar grid, divided by its maximum"""
    if int(width) < 1:
        raise ConfigError(f"Image width must be >= 1, got {width}")
    require_positive("pixel_size", pixel_size)
    width = int(width)

    offsets = (np.arange(width) - width // 2) * pixel_size
    x, y = np.meshgrid(offsets, offsets)
    rho = np.hypot(x, y)
    theta = np.mod(np.arctan2(y, x), TWO_PI)

    range_coordinate = rho / scan.range_resolution - 0.5
    inside = range_coordinate <= scan.range_bins - 0.5
    range_coordinate = np.clip(range_coordinate, 0.0, scan.range_bins - 1)
    azimuth_coordinate = _azimuth_coordinate(scan, theta)

    wrapped = np.vstack([scan.intensities, scan.intensities[:1]])
    values = ndimage.map_coordinates(
        wrapped,
        [azimuth_coordinate.ravel(), range_coordinate.ravel()],
        order=1,
        mode="nearest",
    ).reshape(width, width)
    values = np.where(inside, values, 0.0)

    peak = values.max()
    if peak > 0.0:
        values = values / peak
    return CartesianImage(values, float(pixel_size))


# ---------------------------------------------------------------------------
# scan files


def save_polar_scan(scan: PolarScan, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(
            SCAN_HEADER.pack(
                SCAN_MAGIC, scan.azimuth_count, scan.range_bins, float(
                    scan.range_resolution
                )
            )
        )
        handle.write(scan.azimuth_angles.astype("<f8").tobytes())
        handle.write(scan.intensities.astype("<f4").tobytes())
    return path


def load_polar_scan(path) -> PolarScan:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"Scan file not found: {path}") from None

    if len(blob) < SCAN_HEADER.size:
        raise DataError(f"{path}: truncated scan header")
    magic, azimuths, bins, resolution = SCAN_HEADER.unpack_from(blob)
    if magic != SCAN_MAGIC:
        raise DataError(f"{path}: not a polar scan file (magic {magic!r})")
    expected = SCAN_HEADER.size + 8 * azimuths + 4 * azimuths * bins
    if len(blob) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(blob)}")

    angles = np.frombuffer(blob, dtype="<f8", count=azimuths, offset=SCAN_HEADER.size)
    intensities = np.frombuffer(
        blob, dtype="<f4", count=azimuths * bins, offset=SCAN_HEADER.size + 8 * azimuths
    ).reshape(azimuths, bins)
    return PolarScan(
        intensities.astype(np.float64), resolution, angles.astype(np.float64)
    )


def load_polar_scan_csv(path, range_resolution: float) -> PolarScan:
    """Debug format: header azimuth,b0,b1,... and one row per azimuth"""
    path = Path(path)
    try:
        frame = pd.read_csv(path, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"Scan file not found: {path}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"Scan file {path} is empty") from None

    columns = [c.strip() for c in frame.columns]
    expected = ["azimuth"] + [f"b{k}" for k in range(len(columns) - 1)]
    if len(columns) < 2 or columns != expected:
        raise DataError(f"{path}: header must be azimuth,b0,b1,...")
    values = frame.apply(lambda col: pd.to_numeric(col, errors="coerce")).to_numpy(
        dtype=np.float64
    )
    if not np.all(np.isfinite(values)):
        line = int(np.flatnonzero(~np.all(np.isfinite(values), axis=1))[0]) + 2
        raise DataError(f"{path}: non-numeric value on line {line}")
    return PolarScan(values[:, 1:], range_resolution, values[:, 0])


def load_scan(path, range_resolution: Optional[float] = None) -> PolarScan:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        if range_resolution is None:
            raise ConfigError("CSV scans need --range-resolution")
        return load_polar_scan_csv(path, range_resolution)
    return load_polar_scan(path)


class ExtractComponent:
    """``dicp extract``: BFAR / CA-CFAR detections of a scan file as CSV"""

    def __init__(self, settings: Dict[str, Any]):
        self.settings = settings

    @staticmethod
    def add_arguments(parser) -> None:
        parser.add_argument(
            "--scan", required=True, help="PSCN scan file (or debug CSV)"
        )
        parser.add_argument("--detector", choices=DETECTOR_KINDS)
        parser.add_argument(
            "--a", type=float, dest="scale_a", help="threshold multiplier"
        )
        parser.add_argument("--b", type=float, dest="offset_b", help="threshold offset")
        parser.add_argument("--train-cells", type=int, dest="train_cells")
        parser.add_argument("--guard-cells", type=int, dest="guard_cells")
        parser.add_argument("--min-range-bin", type=int, dest="min_range_bin")
        parser.add_argument("--range-resolution", type=float, dest="range_resolution")
        parser.add_argument("--out", required=True, help="output pointcloud CSV")

    def build_config(self, args) -> DetectorConfig:
        document = apply_overrides(
            {"detector": section(self.settings, "detector")},
            {
                "detector.kind": args.detector,
                "detector.scale_a": args.scale_a,
                "detector.offset_b": args.offset_b,
                "detector.train_cells": args.train_cells,
                "detector.guard_cells": args.guard_cells,
                "detector.min_range_bin": args.min_range_bin,
            },
        )
        return DetectorConfig.from_dict(document["detector"])

    def run(self, args) -> PointCloud:
        cfg = self.build_config(args)
        scan = load_scan(args.scan, args.range_resolution)
        logger.info(
            "Extracting points from %d x %d scan with %s",
            scan.azimuth_count,
            scan.range_bins,
            cfg.kind,
        )
        cloud = detect(scan, cfg)
        logger.info("Found %d detections", cloud.size)
        save_pointcloud_csv(cloud, args.out)
        return cloud
