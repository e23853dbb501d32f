import pytest
import torch

from pam.supernet import SupernetConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def default_config():
    return SupernetConfig()


@pytest.fixture(scope="session")
def small_config():
    # 16x16 inputs: the 4-stage network on 4x4 features
    return SupernetConfig(resolution=16, pyramid_scales=(1, 2, 4))


# --- acceptance report: one pass/fail line per criterion --------------------------------

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    if report.when == "setup" and report.passed:
        return
    _ACCEPTANCE[number] = (title, report.passed, call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, duration = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}  ({duration:.1f} s)")
