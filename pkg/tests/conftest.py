import numpy as np
import pytest

from bdfqns.fem import build_mixed_space
from bdfqns.mesh import unit_square_mesh


@pytest.fixture(scope="session")
def space8():
    return build_mixed_space(unit_square_mesh(8))


@pytest.fixture(scope="session")
def space4():
    return build_mixed_space(unit_square_mesh(4))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
