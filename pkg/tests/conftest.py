import math

import numpy as np
import pytest

from dicp_components.pointcloud import PointCloud
from dicp_components.scene import PostSpec, SceneSpec, WallSpec
from dicp_components.se_geometry import Pose, inverse, planar_pose, transform_points


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def room_points(spacing: float = 0.25) -> np.ndarray:
    """Two perpendicular walls plus two posts: fully constrains a planar pose"""
    walls = [
        WallSpec((-4.0, -3.0), (5.0, -3.0), spacing),
        WallSpec((-4.0, -3.0), (-4.0, 4.0), spacing),
    ]
    posts = [PostSpec((2.0, 1.5), 6, 0.3), PostSpec((-1.0, 2.5), 6, 0.3)]
    return np.vstack([w.points() for w in walls] + [p.points() for p in posts])


def room_spec(**overrides) -> SceneSpec:
    settings = {
        "walls": (
            WallSpec((-4.0, -3.0), (5.0, -3.0), 0.25),
            WallSpec((-4.0, -3.0), (-4.0, 4.0), 0.25),
        ),
        "posts": (PostSpec((2.0, 1.5), 6, 0.3), PostSpec((-1.0, 2.5), 6, 0.3)),
        "seed": 3,
    }
    settings.update(overrides)
    return SceneSpec(**settings)


@pytest.fixture
def room():
    return PointCloud(room_points())


def moved_copy(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Source cloud that ``pose`` maps exactly onto ``cloud``"""
    return PointCloud(transform_points(inverse(pose), cloud.points))


@pytest.fixture
def small_scene(rng):
    """30 source / 60 target random 2D points, source offset by a small pose"""
    target = PointCloud(rng.uniform(-3.0, 3.0, (60, 2)))
    truth = planar_pose(0.15, -0.1, math.radians(4.0))
    picked = target.points[rng.choice(60, 30, replace=False)]
    noise = rng.normal(0.0, 0.02, (30, 2))
    source_points = transform_points(inverse(truth), picked) + noise
    source = PointCloud(source_points, prior_weights=rng.uniform(0.3, 1.0, 30))
    return source, target, truth
