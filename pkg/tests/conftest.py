import numpy as np
import pytest

from bayhem.gp import OptimizerConfig
from bayhem.kernels import Hyperparams


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def fast_opt():
    return OptimizerConfig(n_starts=3, max_iter=150, seed=0)


@pytest.fixture
def hp2():
    """Well-conditioned 2-d hyperparameters for fixed-theta tests."""
    return Hyperparams(beta=[0.5], sigma2=1.3, lengthscales=[0.15, 0.2])
