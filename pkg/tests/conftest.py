import os
import sys
from pathlib import Path

import numpy as np
import pytest

os.environ.setdefault("RESFCN_CHECK_FINITE", "1")
sys.path.insert(0, str(Path(__file__).parent))

from resfcn import tensor  # noqa: E402

tensor.set_check_finite(True)

_CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        verdict = "PASS" if _CRITERIA[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")
