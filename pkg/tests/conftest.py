import numpy as np
import pytest

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion of the build")


def pytest_runtest_logreport(report):
    item_marker = getattr(report, "acceptance", None)
    if item_marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _ACCEPTANCE[item_marker] = report.outcome


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        rep.acceptance = (marker.args[0], marker.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), outcome in sorted(_ACCEPTANCE.items()):
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def rand_image(rng):
    def make(h=16, w=16):
        return rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)

    return make
