import numpy as np
import pytest

from omoq.synth import synthesize


@pytest.fixture(scope="session")
def synth20(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth20")
    synthesize(20, root, seed=0)
    return root / "manifest.csv"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed"):
        return
    detail = dict(item.user_properties).get("detail", "")
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
    if rep.outcome == "skipped" and isinstance(rep.longrepr, tuple):
        detail = rep.longrepr[2]
    _ACCEPTANCE[marker.args[0]] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
