import functools

import numpy as np
import pytest

from flowgrad.harness.runner import backward_history
from flowgrad.harness.scenarios import reference_history


@functools.lru_cache(maxsize=None)
def forward(name):
    """Forward history of a reference scenario, computed once per session."""
    return reference_history(name)


@functools.lru_cache(maxsize=None)
def backward(name):
    return backward_history(forward(name))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
