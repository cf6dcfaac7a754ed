import pytest

from groundlens import toy
from groundlens.scheduler import make_schedule

# acceptance lines collected by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def vocab():
    return toy.build_vocab()


@pytest.fixture(scope="session")
def planted():
    return toy.build_model()


@pytest.fixture(scope="session")
def random_model():
    return toy.build_model(seed=5, planted=False)


@pytest.fixture(scope="session")
def sched():
    return make_schedule()


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    toy.write_toy_assets(out)
    return out


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
