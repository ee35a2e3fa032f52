import sys
import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        status, title, secs = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title} ({secs:.1f}s)")
