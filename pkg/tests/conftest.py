import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from exoplan.exbmdp import EXBMDPSpec, random_spec  # noqa: E402


@pytest.fixture
def tiny_spec():
    """2 endo x 2 exo x 2 actions, hand-written."""
    endo = np.array([
        [[0.9, 0.1], [0.2, 0.8]],
        [[0.5, 0.5], [0.0, 1.0]],
    ])
    exo = np.array([[0.7, 0.3], [0.4, 0.6]])
    reward = np.array([[0.0, 0.1], [1.0, 0.3]])
    emission = np.array([[0, 1], [2, 3]])
    return EXBMDPSpec(endo, exo, reward, emission, np.array([0.6, 0.4]), np.array([0.5, 0.5]), 0.9)


@pytest.fixture
def small_spec():
    return random_spec(4, 3, 2, np.random.default_rng(7))
