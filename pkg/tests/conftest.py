import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def config_path():
    return str(ROOT / "config.yaml")


@pytest.fixture(scope="session")
def small_frameset():
    from src.synth_data import SynthConfig, synthesize_frameset
    return synthesize_frameset(4, 64, 64, seed=3, cfg=SynthConfig(frames_per_cell=2))


@pytest.fixture(autouse=True, scope="session")
def single_threaded_blas():
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield
