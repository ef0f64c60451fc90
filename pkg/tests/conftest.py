import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from infinilab import tensor as T  # noqa: E402


@pytest.fixture
def check_finite():
    T.set_check_finite(True)
    yield
    T.set_check_finite(False)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
