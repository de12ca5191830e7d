import numpy as np
import pytest

from deskdrive.action import ActionConfig
from deskdrive.raster import RasterConfig
from deskdrive.simkernel import DynamicsLimits, EpisodeConfig
from deskdrive.templates import (
    blocked_lane_scene,
    intersection_scene,
    straight_scene,
    turn_scene,
)


@pytest.fixture(scope="session")
def small_raster():
    return RasterConfig(width=64, height=64, u0=32, v0=48, n_past_frames=2)


@pytest.fixture(scope="session")
def episode_cfg(small_raster):
    return EpisodeConfig(raster=small_raster)


@pytest.fixture(scope="session")
def limits():
    return DynamicsLimits()


@pytest.fixture(scope="session")
def action_cfg():
    return ActionConfig()


@pytest.fixture(scope="session")
def straight_fixture():
    return straight_scene(length=60.0, seed=0)


@pytest.fixture(scope="session")
def objects_fixture():
    return straight_scene(length=60.0, seed=3, n_objects=3)


@pytest.fixture(scope="session")
def left_turn_fixture():
    return turn_scene("left", seed=2, n_objects=2)


@pytest.fixture(scope="session")
def intersection_fixture():
    return intersection_scene(seed=7, n_objects=2)


@pytest.fixture(scope="session")
def blocked_fixture():
    return blocked_lane_scene()
