import re

import pytest

ACCEPTANCE = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_outcomes: dict = {}


def pytest_runtest_logreport(report):
    m = ACCEPTANCE.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    if report.when == "call" or report.outcome != "passed":
        if report.skipped:
            _outcomes[key] = "SKIP"
        elif report.failed:
            _outcomes[key] = "FAIL"
        elif report.when == "call":
            _outcomes.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (num, name), outcome in sorted(_outcomes.items()):
        terminalreporter.write_line(f"criterion {num:2d} {name.replace('_', ' ')}: {outcome}")


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(12345)
