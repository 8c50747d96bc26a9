import os
from collections import OrderedDict

import numpy as np
import pytest

os.environ.setdefault("ARNET_THREADS", "1")

# criterion number -> (title, [outcomes])
_CRITERIA: "OrderedDict[int, list]" = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_collection_modifyitems(session, config, items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m:
            n, title = m.args
            _CRITERIA.setdefault(n, [title, []])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA[m.args[0]][1].append((item.name, rep.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, results = _CRITERIA[n]
        if not results:
            status = "NOT RUN"
        elif all(o == "passed" for _, o in results):
            status = "PASS"
        elif all(o == "skipped" for _, o in results):
            status = "SKIPPED"
        else:
            status = "FAIL"
        failed = [name for name, o in results if o == "failed"]
        extra = f"  (failed: {', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {n}: {status} - {title}{extra}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    from arnet.data import SynthConfig, synthesize

    root = tmp_path_factory.mktemp("synth")
    synthesize(SynthConfig(count=4, size=64, delta=0.3, seed=5), root)
    return root
