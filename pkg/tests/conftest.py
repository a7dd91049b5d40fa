import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def criterion_report(request):
    """Record one summary line per acceptance criterion; printed at the end of the run."""
    lines = request.config.stash[_LINES_KEY]

    def report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} -- {detail}"
        lines.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
