"""
Shared fixtures: small geometries and datasets that keep the unit tests fast.
"""

import numpy as np
import pytest

from python_pat.acoustics import AcousticOperator, make_geometry
from python_pat.grids import SeededRng
from python_pat.models import PhantomSpec
from python_pat.phantoms import build_dataset


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def small_geometry():
    """16x16 grid, unpadded, 8 sensors on the top edge, 24 time samples."""
    return make_geometry((16, 16), dx=1e-4, sound_speed=1500.0, n_t=24)


@pytest.fixture
def small_operator(small_geometry):
    return AcousticOperator(small_geometry)


@pytest.fixture
def padded_geometry():
    """32x32 grid padded by 16 voxels, 16 sensors, 48 time samples."""
    return make_geometry((32, 32), dx=1e-4, sound_speed=1500.0, n_t=48, padding=16)


@pytest.fixture
def tiny_dataset(small_geometry, small_operator):
    return build_dataset(4, PhantomSpec.vessels(3), small_geometry, 15.0, SeededRng(3),
                         operator=small_operator)


@pytest.fixture
def positive_images():
    def make(shape, seed=0):
        return 0.5 + np.random.default_rng(seed).random(shape)
    return make


TINY_CONFIG = """
# small end-to-end run
geometry.dims = 16, 16
geometry.n_t = 24
geometry.padding = 4
geometry.subsample_factor = 2
data.n_train = 4
data.n_test = 2
data.n_transfer = 2
dgd.k_max = 2
dgd.steps_per_stage = 6
dgd.transfer_epochs = 1
dgd.log_every = 2
unet.epochs = 2
unet.transfer_epochs = 1
tv.lambda_grid = 1e-4, 1e-3
tv.iterations = 3
tv.inner_iters = 5
tv.lipschitz_iters = 5
bench.iteration_points = 1, 2
bench.timing_runs = 2
bench.timing_iterations = 2
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / 'tiny.cfg'
    path.write_text(TINY_CONFIG, encoding='utf-8')
    return path
