import pytest

_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Record ``(passed, detail)`` per criterion; printed as one line each at the end of the run."""
    return request.config.stash.setdefault(_KEY, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(str(k).rstrip("abcdefgh")), str(k))):
        passed, detail = results[key]
        status = "PASS" if passed is True else "FAIL" if passed is False else "INFO"
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
