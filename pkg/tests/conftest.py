import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lowrank_mtl import data, gradcheck, model  # noqa: E402


@pytest.fixture(autouse=True)
def _quiet_step_warnings():
    logging.getLogger("lowrank_mtl").setLevel(logging.ERROR)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny():
    """Tiny rectifier-free network with a 12-sample, 4-task dataset."""
    return gradcheck.tiny_problem(seed=3, relu=False)


@pytest.fixture
def tiny_relu():
    return gradcheck.tiny_problem(seed=3, relu=True)


@pytest.fixture(scope="session")
def default_dataset():
    return data.generate_synthetic(7, 200, 8, 64, latent_rank=2)


@pytest.fixture
def small_config():
    return model.NetworkConfig(input_shape=(1, 32), channels=(2, 3, 3, 4), kernels=(3, 2, 2, 2), m=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
