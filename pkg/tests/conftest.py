from __future__ import annotations

import numpy as np
import pytest

from reenact.tensor import precision

# (criterion, passed, detail) lines from test_acceptance, echoed in the terminal summary
ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
