import numpy as np
import pytest

from slamkit.geometry import PoseSE3


def random_rotation_quat(rng, max_angle=np.pi - 1e-3):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle)
    return np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])


def random_pose(rng, scale=5.0, max_angle=np.pi - 1e-3, timestamp=0.0):
    return PoseSE3(random_rotation_quat(rng, max_angle), rng.uniform(-scale, scale, 3), timestamp)


def random_homography(rng, jitter=0.1):
    H = np.eye(3) + rng.normal(scale=jitter, size=(3, 3))
    H[2, :2] *= 1e-2
    H[:2, 2] = rng.uniform(-20, 20, 2)
    return H


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
