import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp

from yamabe_fem.assembly import (SparseOperator, boundary_mass, lumped_volumes, mass,
                                 mmatrix_report, robin_operator, stiffness)
from yamabe_fem.linalg import spd_probe
from yamabe_fem.mesh import YamabeProblem, boundary_integrate, build_mesh, integrate

from conftest import regular_tet, tet_problem


def reference_p1_stiffness():
    """Classical element matrix of the reference tet with corners 0, e1, e2, e3."""
    grads = np.array([[-1, -1, -1], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    return grads @ grads.T / 6.0


def test_constants_in_kernel(ball1):
    prob = YamabeProblem(ball1, np.zeros(ball1.n_vertices), np.zeros(len(ball1.boundary_vertices)))
    K = stiffness(prob)
    assert np.max(np.abs(K @ np.ones(ball1.n_vertices))) <= 1e-12
    assert K.symmetry_defect() == 0.0


def test_unit_tet_stiffness_matches_reference():
    K = stiffness(tet_problem()).toarray()
    assert np.allclose(K, 8 * reference_p1_stiffness(), atol=1e-14)


def test_metric_scaling_of_stiffness():
    K1 = stiffness(tet_problem()).toarray()
    K4 = stiffness(tet_problem(metric=4 * np.eye(3))).toarray()
    assert np.allclose(K4, 2 * K1, atol=1e-14)


def test_stiffness_permutation_invariant():
    base = stiffness(tet_problem()).toarray()
    verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
    for perm in itertools.permutations(range(4)):
        perm = np.array(perm)
        inv = np.argsort(perm)
        cells = [list(inv[[0, 1, 2, 3]])]
        faces = [f for f in itertools.combinations(range(4), 3)]
        mesh = build_mesh(verts[perm], cells, faces, [0] * 4)
        Kp = stiffness(YamabeProblem(mesh, np.zeros(4), np.zeros(4))).toarray()
        assert np.allclose(Kp, base[np.ix_(perm, perm)], atol=1e-14)


def test_lumped_mass_unit_tet():
    M = mass(tet_problem(), np.ones(4)).toarray()
    assert np.allclose(np.diag(M), 1 / 24) and np.count_nonzero(M - np.diag(np.diag(M))) == 0
    assert mass(tet_problem(), np.zeros(4)).matrix.count_nonzero() == 0


@pytest.mark.parametrize("lumped", [True, False])
def test_mass_integrates_weight(ball1, lumped):
    prob = YamabeProblem(ball1, np.zeros(ball1.n_vertices), np.zeros(len(ball1.boundary_vertices)))
    w = 1 + ball1.vertices[:, 0] ** 2
    M = mass(prob, w, lumped)
    one = np.ones(ball1.n_vertices)
    assert one @ (M @ one) == pytest.approx(integrate(ball1, w), abs=1e-12)
    assert M.symmetry_defect() <= 1e-15


def test_mass_positive_definite_for_positive_weight(ball1):
    prob = YamabeProblem(ball1, np.zeros(ball1.n_vertices), np.zeros(len(ball1.boundary_vertices)))
    assert spd_probe(mass(prob, np.ones(ball1.n_vertices), lumped=False))


def test_mass_length_mismatch():
    with pytest.raises(ValueError):
        mass(tet_problem(), np.ones(3))
    with pytest.raises(ValueError):
        boundary_mass(tet_problem(), np.ones(5))


def test_boundary_mass(ball1):
    tet = tet_problem()
    assert boundary_mass(tet, np.zeros(4)).matrix.count_nonzero() == 0
    B = boundary_mass(tet, np.ones(4)).toarray()
    assert np.trace(B) == pytest.approx(1.5 + math.sqrt(3) / 2, abs=1e-14)
    nb = len(ball1.boundary_vertices)
    prob = YamabeProblem(ball1, np.zeros(ball1.n_vertices), np.zeros(nb))
    w = 1 + ball1.vertices[ball1.boundary_vertices, 2]
    one = np.ones(ball1.n_vertices)
    lumped = one @ (boundary_mass(prob, w, True) @ one)
    consistent = one @ (boundary_mass(prob, w, False) @ one)
    assert lumped == pytest.approx(consistent, abs=1e-12)
    assert lumped == pytest.approx(boundary_integrate(ball1, w), abs=1e-12)
    rows = np.unique(boundary_mass(prob, w, False).matrix.tocoo().row)
    assert set(rows) <= set(ball1.boundary_vertices)


def test_robin_operator_examples(ball1):
    tet = tet_problem()
    L = robin_operator(tet, np.ones(4), np.zeros(4))
    assert np.allclose(L @ np.ones(4), lumped_volumes(tet.mesh), atol=1e-15)
    nb = len(ball1.boundary_vertices)
    prob = YamabeProblem(ball1, np.zeros(ball1.n_vertices), np.zeros(nb))
    assert spd_probe(robin_operator(prob, np.ones(ball1.n_vertices), np.ones(nb)), trials=100)
    neg = robin_operator(tet, -np.ones(4), np.zeros(4))
    v = np.ones(4)
    assert v @ (neg @ v) < 0


def test_robin_additivity_and_coercivity(ball1):
    nb = len(ball1.boundary_vertices)
    prob = YamabeProblem(ball1, np.zeros(ball1.n_vertices), np.zeros(nb))
    A = 0.5 + ball1.vertices[:, 1] ** 2
    c = np.full(nb, 0.7)
    diff = robin_operator(prob, A, c).matrix - robin_operator(prob, 0 * A, c).matrix
    assert abs(diff - mass(prob, A).matrix).max() <= 1e-12
    L = robin_operator(prob, A, c)
    m = lumped_volumes(ball1)
    bound = float(np.min(A))
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = rng.standard_normal(ball1.n_vertices)
        assert v @ (L @ v) >= bound * (v @ (m * v)) - 1e-12


def test_mmatrix_report_examples():
    prob = YamabeProblem(regular_tet(), np.zeros(4), np.zeros(4))
    assert mmatrix_report(stiffness(prob))["monotone_friendly"]
    diag = mmatrix_report(SparseOperator(sp.diags([1.0, 2.0, 3.0])))
    assert diag["monotone_friendly"] and diag["positive_offdiagonal_count"] == 0
    bad = mmatrix_report(SparseOperator(np.array([[1.0, 0.5], [0.5, 1.0]])))
    assert not bad["monotone_friendly"] and bad["positive_offdiagonal_count"] == 2
    assert bad["max_positive_offdiagonal"] == 0.5


def test_sparse_operator_layout(ball1):
    prob = YamabeProblem(ball1, np.zeros(ball1.n_vertices), np.zeros(len(ball1.boundary_vertices)))
    K = stiffness(prob)
    assert np.all(np.diff(K.row_offsets) >= 0)
    for i in range(K.dim):
        cols = K.column_indices[K.row_offsets[i]:K.row_offsets[i + 1]]
        assert len(np.unique(cols)) == len(cols)
    trip = K.to_triplets()
    assert len(trip) == K.matrix.nnz


def test_zero_volume_cell_rejected():
    verts = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
    with pytest.raises(ValueError, match="volume"):
        build_mesh(verts, [[0, 1, 2, 3]], [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]], [0] * 4)
