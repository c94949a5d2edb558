import pytest

from condemp.harness import build_eigensystem
from condemp.spectral import box_eigensystem, solve_interval_eigensystem

_CRITERIA = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance line; printed in the terminal summary."""
    _CRITERIA[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok, detail = _CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'} | {detail}")


@pytest.fixture(scope="session")
def unit():
    return solve_interval_eigensystem(1.0, None, 256)


@pytest.fixture(scope="session")
def unit64():
    return solve_interval_eigensystem(1.0, None, 64)


@pytest.fixture(scope="session")
def square():
    return box_eigensystem([1.0, 1.0], 256)


@pytest.fixture(scope="session")
def interval5():
    return build_eigensystem({"kind": "interval", "length": 5.0, "potential": None}, 64)
