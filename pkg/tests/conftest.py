import pytest

from rydtof.fieldsolver import ApparatusGeometry, solve_potential

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def electrode_profile():
    return solve_potential(ApparatusGeometry(), 5e-4)


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def record(request):
    """Log one acceptance line (printed now and again in the terminal summary)."""
    lines = request.config.stash[_ACCEPTANCE]

    def _record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash[_ACCEPTANCE]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
