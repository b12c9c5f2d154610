import contextlib

import pytest


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion as PASS or FAIL for the terminal summary."""
    results = request.config._criteria

    @contextlib.contextmanager
    def record(number: int, title: str):
        note = {"detail": ""}
        try:
            yield note
        except BaseException as e:
            results[number] = ("FAIL", title, f"{note['detail']} {type(e).__name__}: {e}".strip())
            raise
        results[number] = ("PASS", title, note["detail"])

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config._criteria
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, title, detail = results[n]
        line = f"criterion {n} {status}: {title}"
        if detail:
            line += f" ({detail.splitlines()[0]})"
        terminalreporter.write_line(line)
