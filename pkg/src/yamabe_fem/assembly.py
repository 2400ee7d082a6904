"""P1 finite element operators for the Robin conformal Laplacian.

Every operator is assembled as a symmetric CSR matrix. Duplicate entries are
summed by scipy in index order, so results do not depend on thread count.
"""

from __future__ import annotations

import json

import numpy as np
import scipy.sparse as sp

from .mesh import SimplicialMesh, YamabeProblem, check_boundary_field, check_field


class SparseOperator:
    """Symmetric sparse matrix in compressed-row layout.

    Thin wrapper over :class:`scipy.sparse.csr_matrix` that records symmetry and
    exposes the raw CSR arrays.
    """

    def __init__(self, matrix, symmetric=True):
        m = sp.csr_matrix(matrix, dtype=float)
        m.sum_duplicates()
        m.sort_indices()
        self.matrix = m
        self.symmetric = bool(symmetric)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def row_offsets(self):
        return self.matrix.indptr

    @property
    def column_indices(self):
        return self.matrix.indices

    @property
    def values(self):
        return self.matrix.data

    def diagonal(self):
        return self.matrix.diagonal()

    def toarray(self):
        return self.matrix.toarray()

    def __matmul__(self, x):
        return self.matrix @ x

    def __add__(self, other):
        o = other.matrix if isinstance(other, SparseOperator) else other
        return SparseOperator(self.matrix + o, self.symmetric and getattr(other, "symmetric", True))

    def __sub__(self, other):
        o = other.matrix if isinstance(other, SparseOperator) else other
        return SparseOperator(self.matrix - o, self.symmetric and getattr(other, "symmetric", True))

    def __mul__(self, scalar):
        return SparseOperator(self.matrix * float(scalar), self.symmetric)

    __rmul__ = __mul__

    def symmetry_defect(self) -> float:
        d = abs(self.matrix - self.matrix.T)
        return float(d.max()) if d.nnz else 0.0

    def to_triplets(self):
        coo = self.matrix.tocoo()
        return [[int(i), int(j), float(v)] for i, j, v in zip(coo.row, coo.col, coo.data)]

    def dumps(self) -> str:
        return json.dumps({"dim": self.dim, "entries": self.to_triplets()})


def _scatter(cells, local, n_vertices):
    """Sum per-cell dense blocks (c, k, k) into a sparse (nv, nv) matrix."""
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n_vertices, n_vertices)).tocsr()
    # exact symmetry: average with the transpose (entries are already equal up to rounding)
    return 0.5 * (mat + mat.T)


def barycentric_gradients(mesh: SimplicialMesh):
    """Coordinate gradients of the P1 hat functions, shape (cells, n+1, n)."""
    e = mesh.edge_matrices()
    inv_t = np.linalg.inv(e)  # rows of E^{-1} are gradients of lambda_1..lambda_n
    grads = np.empty((mesh.n_cells, mesh.dimension + 1, mesh.dimension))
    grads[:, 1:, :] = inv_t
    grads[:, 0, :] = -inv_t.sum(axis=1)
    return grads


def stiffness_matrix(mesh: SimplicialMesh, coeff: float = 1.0):
    """``coeff * int <grad u, grad v>_g`` as a CSR matrix."""
    vol = mesh.metric_volumes()
    if np.any(vol <= 0):
        raise ValueError(f"degenerate cell {int(np.argmin(vol))}")
    grads = barycentric_gradients(mesh)
    ginv = np.linalg.inv(mesh.cell_metric)
    local = np.einsum("cia,cab,cjb->cij", grads, ginv, grads) * (coeff * vol)[:, None, None]
    mat = _scatter(mesh.cells, local, mesh.n_vertices)
    # rows of a P1 stiffness sum to zero; remove rounding drift from the diagonal
    off = (mat - sp.diags(mat.diagonal())).tocsr()
    off.eliminate_zeros()
    off_sum = np.asarray(off.sum(axis=1)).ravel()
    return (off - sp.diags(off_sum)).tocsr()


def lumped_volumes(mesh: SimplicialMesh) -> np.ndarray:
    """Per-vertex share of the metric volume (cell volume split by n+1)."""
    vol = mesh.metric_volumes() / (mesh.dimension + 1)
    return np.bincount(mesh.cells.ravel(), weights=np.repeat(vol, mesh.dimension + 1),
                       minlength=mesh.n_vertices)


def lumped_boundary_areas(mesh: SimplicialMesh) -> np.ndarray:
    """Per-boundary-vertex share of the facet areas, in boundary ordering."""
    n = mesh.dimension
    area = mesh.facet_areas() / n
    pos = mesh.boundary_position[mesh.facets]
    return np.bincount(pos.ravel(), weights=np.repeat(area, n),
                       minlength=len(mesh.boundary_vertices))


def mass_matrix(mesh: SimplicialMesh, weight, lumped=True):
    w = check_field(mesh, weight, "weight")
    if lumped:
        return sp.diags(lumped_volumes(mesh) * w).tocsr()
    k = mesh.dimension + 1
    wbar = w[mesh.cells].mean(axis=1)
    ref = (np.ones((k, k)) + np.eye(k)) / (k * (k + 1))
    local = ref[None] * (mesh.metric_volumes() * wbar)[:, None, None]
    return _scatter(mesh.cells, local, mesh.n_vertices)


def boundary_mass_matrix(mesh: SimplicialMesh, weight, lumped=True):
    w = check_boundary_field(mesh, weight, "weight")
    nv = mesh.n_vertices
    bv = mesh.boundary_vertices
    if lumped:
        diag = np.zeros(nv)
        diag[bv] = lumped_boundary_areas(mesh) * w
        return sp.diags(diag).tocsr()
    n = mesh.dimension
    pos = mesh.boundary_position[mesh.facets]
    wbar = w[pos].mean(axis=1)
    ref = (np.ones((n, n)) + np.eye(n)) / (n * (n + 1))
    local = ref[None] * (mesh.facet_areas() * wbar)[:, None, None]
    return _scatter(mesh.facets, local, nv)


# -------------------------------------------------- problem-level operators

def stiffness(problem: YamabeProblem, coeff=None) -> SparseOperator:
    """``a * int <grad u, grad v>_g`` (``coeff`` overrides ``a``)."""
    c = problem.a if coeff is None else float(coeff)
    return SparseOperator(stiffness_matrix(problem.mesh, c))


def mass(problem: YamabeProblem, weight, lumped=True) -> SparseOperator:
    return SparseOperator(mass_matrix(problem.mesh, weight, lumped))


def boundary_mass(problem: YamabeProblem, weight, lumped=True) -> SparseOperator:
    """``int_dM w u v dS``; callers pass the Robin factor already applied."""
    return SparseOperator(boundary_mass_matrix(problem.mesh, weight, lumped))


def robin_operator(problem: YamabeProblem, zero_order, robin_coeff, coeff=None) -> SparseOperator:
    """Stiffness plus lumped interior and boundary mass terms."""
    mesh = problem.mesh
    mat = (stiffness_matrix(mesh, problem.a if coeff is None else coeff)
           + mass_matrix(mesh, zero_order, True)
           + boundary_mass_matrix(mesh, robin_coeff, True))
    return SparseOperator(mat)


def conformal_laplacian(problem: YamabeProblem, shift=0.0) -> SparseOperator:
    """Discrete operator of the first-eigenvalue quotient (S shifted by ``shift``)."""
    return robin_operator(problem, problem.scalar_curvature + shift, problem.robin_coeff)


def mmatrix_report(op: SparseOperator, threshold=1e-12) -> dict:
    m = op.matrix.tocoo()
    off = m.row != m.col
    pos = m.data[off] > threshold
    vals = m.data[off][pos]
    rows = m.row[off][pos]
    return {
        "positive_offdiagonal_count": int(pos.sum()),
        "max_positive_offdiagonal": float(vals.max()) if len(vals) else 0.0,
        "worst_row": int(rows[np.argmax(vals)]) if len(vals) else -1,
        "monotone_friendly": bool(pos.sum() == 0),
    }

