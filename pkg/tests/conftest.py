import numpy as np
import pytest

from lidartrack.geometry import CameraIntrinsics
from lidartrack.mapping import GlobalMap, downsample
from lidartrack.synth import SceneConfig, TrajectoryConfig, generate_scene, generate_trajectory


@pytest.fixture(scope="session")
def K():
    """Paper-resolution camera used by most fixtures."""
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=480.0, cy=160.0,
                            width=960, height=320)


@pytest.fixture(scope="session")
def K_small():
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=240.0, cy=80.0,
                            width=480, height=160)


@pytest.fixture(scope="session")
def corridor():
    """Shared small corridor world: (map, gt trajectory at slow speed)."""
    scene = generate_scene(SceneConfig(extent=60.0, seed=1))
    gmap = downsample(GlobalMap.build(scene), 0.1)
    traj = generate_trajectory(TrajectoryConfig(frame_count=4, speed=0.25, seed=1))
    return gmap, traj
