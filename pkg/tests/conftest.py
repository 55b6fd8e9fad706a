import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from presets import preset_model  # noqa: E402
from streams import DriverStream  # noqa: E402


@pytest.fixture
def stream():
    def make(tag="test", seed=12345, index=0):
        return DriverStream(seed, tag, index)
    return make


@pytest.fixture
def pure_fragmentation():
    return preset_model("pure-fragmentation")


@pytest.fixture
def full_death():
    return preset_model("full-death")


@pytest.fixture
def linear_mf():
    return preset_model("linear-mean-field")
