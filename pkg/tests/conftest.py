import numpy as np
import pytest
import torch

torch.set_num_threads(1)

# acceptance criterion -> [description, outcomes]
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion this test verifies")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _CRITERIA.setdefault(m.args[0], [m.args[1], []])
            item.user_properties.append(("criterion", m.args[0]))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA[crit][1].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        text, outcomes = _CRITERIA[n]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"{status:7s} criterion {n}: {text}")


@pytest.fixture
def tiny_batches():
    rng = np.random.default_rng(0)
    src = rng.random((2, 16, 16, 3)).astype(np.float32)
    labels = rng.integers(0, 3, size=(2, 16, 16))
    tgt = rng.random((2, 16, 16, 3)).astype(np.float32)
    return (src, labels), tgt
