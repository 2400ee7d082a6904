import numpy as np
import pytest

from yamabe_fem.gallery import ball_mesh, case_problem
from yamabe_fem.mesh import YamabeProblem, boundary_facets_from_cells, build_mesh

ACCEPTANCE_LINES = []


def unit_tet(metric=None, fields=None, boundary_fields=None):
    verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
    cells = [[0, 1, 2, 3]]
    facets, parents = boundary_facets_from_cells(np.array(cells), 3)
    g = None if metric is None else np.array([metric])
    return build_mesh(verts, cells, facets, parents, g, fields, boundary_fields)


def regular_tet():
    verts = [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]]
    cells = [[0, 1, 2, 3]]
    facets, parents = boundary_facets_from_cells(np.array(cells), 3)
    return build_mesh(verts, cells, facets, parents)


def tet_problem(s=0.0, h=0.0, metric=None):
    mesh = unit_tet(metric)
    return YamabeProblem(mesh, np.full(4, float(s)), np.full(4, float(h)))


@pytest.fixture
def tet():
    return unit_tet()


@pytest.fixture(scope="session")
def ball1():
    return ball_mesh(1)


@pytest.fixture(scope="session")
def ball2():
    return ball_mesh(2)


@pytest.fixture(scope="session")
def ball3():
    return ball_mesh(3)


@pytest.fixture(scope="session")
def const_neg2():
    return case_problem("const", 2, {"s0": -6.0, "h0": 0.0})


@pytest.fixture(scope="session")
def cap2():
    return case_problem("cap-negative", 2)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
