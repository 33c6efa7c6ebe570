import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import RESULTS  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(RESULTS):
        title, ok, detail = RESULTS[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}: {detail}")
