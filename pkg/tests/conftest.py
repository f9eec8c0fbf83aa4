import contextlib

import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line for an acceptance criterion."""
    results = request.config.stash.setdefault(_RESULTS, {})

    @contextlib.contextmanager
    def record(number, title):
        note = {"detail": ""}
        try:
            yield note
        except BaseException as exc:
            results[number] = (False, title, note["detail"] or str(exc).splitlines()[0])
            raise
        results[number] = (True, title, note["detail"])

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, detail = results[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
