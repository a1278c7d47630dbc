import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from dfwhittle.core import RmabInstance, read_json
from dfwhittle.datagen import read_dataset

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
sys.path.insert(0, str(TESTS))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

WORKED_KERNEL = np.array([[[0.8, 0.2], [0.2, 0.8]],
                          [[0.5, 0.5], [0.5, 0.5]]])
WORKED_REWARD = np.array([0.0, 1.0])
WORKED_GAMMA = 0.5


def load_instance(name: str) -> RmabInstance:
    return RmabInstance.from_json(read_json(FIXTURES / name))


@pytest.fixture
def worked():
    return WORKED_KERNEL.copy(), WORKED_REWARD.copy(), WORKED_GAMMA


@pytest.fixture
def pair_instances():
    return [load_instance("pair_m2.json"), load_instance("pair_m3.json")]


@pytest.fixture
def tiny_dataset():
    return read_dataset(FIXTURES / "tiny_dataset")


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
