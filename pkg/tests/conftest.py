import pytest
import torch

from fsrkit.fsr import FSR, FsrConfig

_criteria = {}
_notes = {}


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


@pytest.fixture
def fsr_layer():
    torch.manual_seed(0)
    layer = FSR(8, 10, FsrConfig())
    layer.eval()
    return layer


@pytest.fixture
def criterion_note(request):
    """Attach a line of observed values to this test's criterion summary."""
    marker = request.node.get_closest_marker("criterion")

    def note(text):
        _notes.setdefault(marker.args[0], []).append(text)

    return note


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = _criteria_of.get(report.nodeid)
    if marker is None:
        return
    number, title = marker
    passed, _ = _criteria.get(number, (True, title))
    _criteria[number] = (passed and report.outcome == "passed", title)


_criteria_of = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _criteria_of[item.nodeid] = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        passed, title = _criteria[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}")
        for text in _notes.get(number, []):
            terminalreporter.write_line(f"    {text}")
