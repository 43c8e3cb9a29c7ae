import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture(scope="session")
def criterion(request):
    """Record one pass/fail line per acceptance criterion; returns the verdict."""
    lines = request.config.stash[_RESULTS]

    def record(num, ok: bool, detail: str) -> bool:
        line = f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((str(num), line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda kv: (len(kv[0]), kv[0])):
            terminalreporter.write_line(line)
