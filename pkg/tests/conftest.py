import numpy as np
import pytest

_ACCEPTANCE: dict[int, str] = {}
N_CRITERIA = 10


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records one pass/fail line for criterion n."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)

    return record


_STATE = {"acceptance_collected": False}


def pytest_collection_modifyitems(session, config, items):
    _STATE["acceptance_collected"] = any(item.module.__name__.endswith("test_acceptance") for item in items)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not (_STATE["acceptance_collected"] or _ACCEPTANCE):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        terminalreporter.write_line(_ACCEPTANCE.get(n, f"criterion {n:2d}: FAIL  (no result recorded)"))
