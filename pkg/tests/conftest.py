import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rdslam.geometry import CameraIntrinsics

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def K():
    return CameraIntrinsics(500.0, 500.0, 319.5, 239.5, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_rotation_vector(rng, max_angle=np.pi - 0.1, min_angle=1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(min_angle, max_angle)


def random_twist(rng, max_angle=np.pi - 0.1, scale=1.0):
    return np.concatenate([rng.normal(scale=scale, size=3), random_rotation_vector(rng, max_angle)])
