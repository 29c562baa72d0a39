import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture
def record(request):
    """Store one pass/fail line for the acceptance summary."""
    store = request.config.stash.setdefault(_RESULTS, {})

    def _record(number: int, passed: bool, detail: str) -> bool:
        store[number] = (passed, detail)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_RESULTS, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        passed, detail = store[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
