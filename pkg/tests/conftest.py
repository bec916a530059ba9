"""
Pytest configuration and shared fixtures for arch-adapt tests.
"""
import os
import tempfile

import numpy as np
import pytest

# Set test environment variables before importing settings
os.environ['ARCH_ADAPT_LOG_DIR'] = tempfile.mkdtemp(prefix='arch-adapt-logs-')
os.environ['ARCH_ADAPT_THREADS'] = '2'
os.environ['ARCH_ADAPT_RECORD_TIMESTAMPS'] = 'false'
os.environ['DEBUG'] = '1'

from arch_adapt.src.oracle import SyntheticAccuracyOracle, SyntheticDevice  # noqa: E402
from arch_adapt.src.space import load_space, parse_space  # noqa: E402

TOY_SCHEMA = {
    'name': 'toy',
    'input_channels': 3,
    'resolution': '32 [16, 32]',
    'resolution_step': 8,
    'stages': [
        {'op': 'conv2d', 'c': '16 [8, 24]', 'n': 1, 's': 2, 'kernel': 3},
        {'op': 'inverted_bottleneck', 't': '4 [2, 6]', 'c': '16 [8, 16]', 'n': '2 [1, 3]', 's': 2},
        {'op': 'avgpool', 'n': 1},
        {'op': 'fc', 'c': 10},
    ],
}


@pytest.fixture(scope='session')
def mobile_space():
    """Built-in inverted-bottleneck space."""
    return load_space('chamnet-mobile')


@pytest.fixture(scope='session')
def res_space():
    """Built-in residual-bottleneck space."""
    return load_space('chamnet-res')


@pytest.fixture(scope='session')
def toy_space():
    """Small enumerable space (6885 genes)."""
    return parse_space(TOY_SCHEMA)


@pytest.fixture
def toy_schema():
    """Mutable copy of the toy schema mapping."""
    import copy
    return copy.deepcopy(TOY_SCHEMA)


@pytest.fixture(scope='session')
def toy_accuracy(toy_space):
    """Noiseless synthetic accuracy landscape over the toy space."""
    return SyntheticAccuracyOracle(toy_space, seed=3)


@pytest.fixture(scope='session')
def mobile_accuracy(mobile_space):
    """Noiseless synthetic accuracy landscape over the mobile space."""
    return SyntheticAccuracyOracle(mobile_space, seed=1)


@pytest.fixture(scope='session')
def cpu_device():
    return SyntheticDevice('cpu_like')


@pytest.fixture(scope='session')
def dsp_device():
    return SyntheticDevice('dsp_like')


@pytest.fixture
def gp_data():
    """30 points in [0, 1]^3 with a smooth target."""
    rng = np.random.default_rng(42)
    X = rng.random((30, 3))
    y = np.sin(3 * X[:, 0]) + X[:, 1] ** 2 - 0.5 * X[:, 2]
    return X, y


@pytest.fixture(autouse=True)
def reset_logging():
    """Reset logging configuration between tests."""
    import logging
    # Clear all handlers from the root logger
    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
    yield
    # Clean up after test
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
