import numpy as np
import pytest

from qdtn import fem
from qdtn.mesh import Patch, build_structured_mesh, make_probe_spec, tag_boundary_regions

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(':'))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def square16():
    return build_structured_mesh("unit_square", 16)


@pytest.fixture(scope="session")
def tagged_square16():
    return tag_boundary_regions(build_structured_mesh("unit_square", 16), Patch(1, 1.0, ((0.3, 0.7),)), 0.1)


@pytest.fixture(scope="session")
def tagged_square64():
    return tag_boundary_regions(build_structured_mesh("unit_square", 64), Patch(1, 1.0, ((0.3, 0.7),)), 0.1)


@pytest.fixture(scope="session")
def square_spec64(tagged_square64):
    return make_probe_spec(tagged_square64, [0.5, 1.0], [0.0, 1.0], 0.15, 0.0625)


@pytest.fixture(scope="session")
def tagged_cube16():
    m = build_structured_mesh("unit_cube", 16)
    return tag_boundary_regions(m, Patch(2, 1.0, ((0.1, 0.9), (0.1, 0.9))), 0.05)


@pytest.fixture(scope="session")
def cube_spec16(tagged_cube16):
    h = tagged_cube16.spacing
    return make_probe_spec(tagged_cube16, [0.5, 0.5, 1.0], [0.0, 0.0, 1.0], 0.3, 4 * h, delta_max=0.5)


@pytest.fixture(scope="session")
def I2():
    return fem.identity_field(2)


@pytest.fixture(scope="session")
def I3():
    return fem.identity_field(3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
