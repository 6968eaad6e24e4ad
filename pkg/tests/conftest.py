import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gclmo.datagen import generate_catalog, generate_logs  # noqa: E402


@pytest.fixture(scope="session")
def small_catalog():
    return generate_catalog(600, 4, 60, skew=1.1, dim=8, seed=3)


@pytest.fixture(scope="session")
def small_logs(small_catalog):
    return list(generate_logs(small_catalog, 80, 6, page_size=8, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    def report(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
