import numpy as np
import pytest

from uepmm.analytics import VarianceProfile
from uepmm.blockmat import build_class_profile


@pytest.fixture
def three_level_profile():
    """3x3 grid with one block per level on each side and the default merge."""
    return build_class_profile([1, 2, 3], [1, 2, 3], 3)


@pytest.fixture
def three_level_variances():
    return VarianceProfile.from_levels([10.0, 1.0, 0.1], [1, 2, 3], [1, 2, 3], U=5, Q=5, M=100)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
