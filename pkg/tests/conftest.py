import numpy as np
import pytest

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running experiment")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict(request):
    """Record and print a one-line PASS/FAIL for an acceptance criterion, then assert it."""

    def record(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        print(line)
        request.node.user_properties.append(("acceptance", line))
        assert ok, line

    return record


def pytest_runtest_logreport(report):
    if report.when == "call":
        _ACCEPTANCE.extend(v for k, v in report.user_properties if k == "acceptance")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
