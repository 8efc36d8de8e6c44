import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

# One line per acceptance criterion, echoed after the run summary so the
# numbers are visible without -s (test_acceptance.py appends to this).
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    failed = [r.nodeid.split("::")[-1]
              for r in terminalreporter.stats.get("failed", [])
              if "test_acceptance" in r.nodeid]
    if not (ACCEPTANCE_LINES or failed):
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.line(line)
    for name in failed:
        terminalreporter.line(f"{name}: FAIL (see traceback above)")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
