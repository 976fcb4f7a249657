import numpy as np
import pytest

from nlbackbone import M0, Model
from nlbackbone.harness.config import PRESETS, build_mechanism

JUMP_PRESETS = ["jumps_mixed", "jumps_exp", "jumps_atoms", "jumps_heavy_quadratic"]


def preset_model(name, require_grey=True):
    return Model(build_mechanism({"preset": name}), require_grey=require_grey)


@pytest.fixture
def m0():
    return Model(M0)


@pytest.fixture(params=JUMP_PRESETS)
def jump_model(request):
    return preset_model(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


__all__ = ["preset_model", "JUMP_PRESETS", "PRESETS"]
