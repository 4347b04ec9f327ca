import numpy as np
import pytest

from advlm import autodiff as ad

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture(autouse=True)
def _precision64():
    # The oracles need 64-bit arithmetic; training configs opt into 32 explicitly.
    with ad.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def record_criterion():
    """Log one acceptance line; the summary is printed at the end of the session."""

    def record(name: str, passed: bool, detail: str = "") -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _ACCEPTANCE.append((name, passed, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in _ACCEPTANCE:
        terminalreporter.write_line(line)
