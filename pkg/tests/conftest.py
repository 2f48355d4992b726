"""Acceptance reporting: one PASS/FAIL line per ``criterion``-marked test."""

import pytest

_LINES = pytest.StashKey[dict]()
_NOTES = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion reported in the summary")
    config.stash[_LINES] = {}


@pytest.fixture
def note(request):
    """Append a measurement to the criterion's summary line."""
    notes = []
    request.node.stash[_NOTES] = notes
    return lambda text: notes.append(str(text))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        number, title = marker.args
        status = "PASS" if rep.passed else "FAIL"
        notes = "; ".join(item.stash.get(_NOTES, []))
        line = f"criterion {number:>2} {status}  {title}" + (f"  [{notes}]" if notes else "")
        item.config.stash[_LINES][number] = line


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_LINES]
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
