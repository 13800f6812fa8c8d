import numpy as np
import pytest

from trinas import tensor as T


@pytest.fixture
def f64():
    """Run the test body in 64-bit precision."""
    with T.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance reporting -------------------------------------------------------------
_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records and prints a PASS/FAIL line for
    acceptance criterion ``n``, then fails the test if ``ok`` is false."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
