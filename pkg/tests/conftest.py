import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import settings

from mrfcmfm.income import load_design

# fixed example sequence so reruns are reproducible
settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")


def data_path(name):
    return resources.files("mrfcmfm") / "data" / name


@pytest.fixture(scope="session")
def design1_strong():
    return load_design(data_path("design1_strong.json"))


@pytest.fixture
def toy_Z():
    # two loose pairs {0,1} and {2,3}
    return np.array([[0.0, 3.0, 1.0, 0.4],
                     [3.0, 0.0, 1.5, 0.9],
                     [1.0, 1.5, 0.0, 2.6],
                     [0.4, 0.9, 2.6, 0.0]])


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
