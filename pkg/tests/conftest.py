from pathlib import Path

import numpy as np
import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# (criterion, passed, detail) lines filled in by the acceptance suite
ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line("[%s] %d. %s: %s" % ("PASS" if passed else "FAIL", number, name, detail))
