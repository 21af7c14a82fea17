from __future__ import annotations

import numpy as np
import pytest

from smp_kit.chain import GeneratorMatrix


@pytest.fixture
def symmetric_q() -> GeneratorMatrix:
    return GeneratorMatrix([[-1.0, 1.0], [1.0, -1.0]])


@pytest.fixture
def three_state_q() -> GeneratorMatrix:
    return GeneratorMatrix([[-1.5, 1.0, 0.5], [0.2, -0.7, 0.5], [2.0, 0.0, -2.0]])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record():
    """Log one acceptance verdict; the lines are printed in the terminal summary."""

    def _record(criterion: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")
