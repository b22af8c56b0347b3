"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""
import pytest

_RESULTS = {}   # criterion number -> [title, passed, details]


@pytest.fixture
def detail(request):
    """Append a human-readable measurement to the current criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")
    notes = []
    yield notes.append
    if marker is not None:
        entry = _RESULTS.setdefault(marker.args[0], [marker.args[1], True, []])
        entry[2].extend(notes)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    entry = _RESULTS.setdefault(marker.args[0], [marker.args[1], True, []])
    if rep.failed:
        entry[1] = False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, passed, notes = _RESULTS[n]
        line = f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if notes:
            line += " | " + "; ".join(notes)
        terminalreporter.write_line(line)
