import os
import sys

# Add project root to Python path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

import numpy as np  # noqa: E402
import pytest  # noqa: E402
import torch  # noqa: E402

from src.diffnet import DTYPE, Activation, NetworkSpec, ParamVector, init_params  # noqa: E402


def pytest_collection_modifyitems(config, items):
    if os.environ.get('UNLIMITD_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='desk-scale training run, set UNLIMITD_RUN_SLOW=1')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    """1-8-1 ReLU network, P = 25"""
    return NetworkSpec((1, 8, 1), Activation.RELU)


@pytest.fixture
def small_theta(small_spec):
    return init_params(small_spec, seed=3)


@pytest.fixture
def linear_spec():
    """y = w x + b, P = 2; the Jacobian [x, 1] does not depend on the parameters"""
    return NetworkSpec((1, 1), Activation.IDENTITY)


def random_theta(spec, rng, scale=1.0):
    return ParamVector(torch.as_tensor(scale * rng.standard_normal(spec.param_count), dtype=DTYPE), spec)


def random_inputs(spec, K, rng):
    return rng.uniform(-5.0, 5.0, size=(spec.input_dim, K))
