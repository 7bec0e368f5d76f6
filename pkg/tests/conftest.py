import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def verdicts(request):
    """Acceptance lines keyed by criterion number, echoed in the terminal summary."""
    return request.config.stash.setdefault(_LINES, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
