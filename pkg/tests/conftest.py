import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    n, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    if rep.failed or rep.when == "call" or (rep.when == "setup" and rep.skipped):
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA[n] = ("PASS" if rep.passed else "FAIL" if rep.failed else "SKIP", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail = _CRITERIA[n]
        tail = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"[{status}] criterion {n}: {title}{tail}")
