import numpy as np
import pytest

from plasmoheat.geometry import build_circle, build_ellipse, discretize
from plasmoheat.np_core import LaplaceLayers


@pytest.fixture(scope="session")
def ellipse_layers():
    return LaplaceLayers.build(discretize([build_ellipse(3.0, 2.0)], 256))


@pytest.fixture(scope="session")
def ellipse128():
    return LaplaceLayers.build(discretize([build_ellipse(1.0, 2.0 / 3.0)], 128))


@pytest.fixture(scope="session")
def circle_layers():
    return LaplaceLayers.build(discretize([build_circle(1.0)], 64))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# keyed like "08b" so the summary sorts by criterion
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
