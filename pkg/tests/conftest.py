import pytest

from jointscale.harness import desk


@pytest.fixture(scope="session")
def setup():
    return desk.DeskSetup()


@pytest.fixture(scope="session")
def data(setup):
    return desk.datasets(setup)


@pytest.fixture(scope="session")
def model(setup):
    return desk.trained_model(setup)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[1].rstrip(":").rstrip("abc")), s)):
            terminalreporter.write_line(line)
