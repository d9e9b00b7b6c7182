from pathlib import Path

import numpy as np
import pytest

from uraloc.geometry import UraConfig, rotation_from_euler

REPO = Path(__file__).resolve().parents[1]
SCENARIOS = REPO / "scenarios"


@pytest.fixture
def ura():
    return UraConfig(3, 4)


@pytest.fixture
def two_uras():
    west = UraConfig(3, 4, center=(0.0, 2.0, 1.17), rotation=rotation_from_euler(0, 90, 0), array_id="west")
    south = UraConfig(3, 4, center=(2.0, 0.0, 1.17), rotation=rotation_from_euler(90, 90, 0), array_id="south")
    return [west, south]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results):
        terminalreporter.write_line(results[name])
