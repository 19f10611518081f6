import numpy as np
import pytest

from relufields.field import FieldGrid
from relufields.render import CameraPose
from relufields.sh import SH_C0

CUBE = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def random_radiance_grid(rng, n=4, density=(0.5, 3.0)):
    """Positive densities and colors well inside (0, 1), away from both kinks."""
    v = np.empty((n, n, n, 28))
    v[..., 0] = rng.uniform(*density, (n, n, n))
    v[..., 1:] = rng.uniform(-0.05, 0.05, (n, n, n, 27))
    v[..., 1::9] = rng.uniform(0.3, 0.7, (n, n, n, 3)) / SH_C0
    return FieldGrid(v, CUBE.copy())


def small_pose(size=8):
    return CameraPose.look_at([2.5, 1.5, 1.0], [0.0, 0.0, 0.0], size, size, float(size))


@pytest.fixture
def radiance_grid():
    return random_radiance_grid


@pytest.fixture
def pose8():
    return small_pose(8)
