import os

import numpy as np
import pytest

from epimem.scenarios import OneShotParams, build_one_shot, build_sis, sis_from_durations

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MODELS = os.path.join(ROOT, "models")


def model_path(name):
    return os.path.join(MODELS, name)


@pytest.fixture(scope="session")
def sis_step():
    """Single atom, T = 1, lambda* = 2: S* = 1/2, F* = 1."""
    return sis_from_durations(2.0, [1.0], step=1 / 64, max_age=10.0)


@pytest.fixture(scope="session")
def sis_model():
    return build_sis(2.0, 1.0, 3.0)


@pytest.fixture(scope="session")
def example55():
    """alpha = 1, beta = 0.5, T_R = 1, T_V = 2, K == 1, kappa = 0.25."""
    return build_one_shot(OneShotParams(1.0, 0.5, 1.0, 1.0, 2.0, kappa=0.25))


def x_plus_exp_root(c=3.0):
    """Bisection oracle for x + exp(-x) = c."""
    lo, hi = 0.0, c + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid + np.exp(-mid) < c:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
