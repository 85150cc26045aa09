import numpy as np
import pytest

from birec.volume import Grid3, Volume

_acceptance_lines = []


def record_acceptance(name, ok, detail=""):
    """Collect one pass/fail line per acceptance criterion for the final summary."""
    status = "PASS" if ok else "FAIL"
    suffix = f"  ({detail})" if detail else ""
    _acceptance_lines.append(f"  [{status}] {name}{suffix}")


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance criteria:")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def grid8():
    return Grid3((8, 8, 8), (2.0, 2.0, 2.0), (-7.0, -7.0, -7.0))


@pytest.fixture
def vol8(grid8, rng):
    return Volume(grid8, rng.uniform(0.1, 0.9, grid8.dims))
