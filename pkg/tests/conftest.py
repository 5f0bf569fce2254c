import numpy as np
import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; the lines are printed in the summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}"
        _CRITERIA[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
