import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gridsim import kernels  # noqa: E402

# (criterion number, title, passed, detail) recorded by the acceptance tests
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture(scope="session", autouse=True)
def compiled_kernels():
    kernels.warmup()


@pytest.fixture
def verdict():
    """Record one criterion's outcome; the test still asserts it afterwards."""
    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE.append((number, title, bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {number}. {title}: {detail}")
