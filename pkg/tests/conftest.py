import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one summary line per acceptance criterion."""

    def record(number: int, name: str, passed: bool, detail: str = "", soft: bool = False):
        status = "PASS" if passed else ("SOFT-FAIL" if soft else "FAIL")
        line = f"[{status}] criterion {number:>2}: {name}" + (f" ({detail})" if detail else "")
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
