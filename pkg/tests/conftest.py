from __future__ import annotations

import warnings

import numpy as np
import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class _Recorder:
    def __call__(self, number: int, name: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (name, bool(passed), detail)
        return bool(passed)


@pytest.fixture
def criterion():
    """Record an acceptance verdict; the terminal summary prints one line per criterion."""
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:2d} {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_market_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="total quantity exceeds A")
        yield
