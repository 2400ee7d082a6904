"""Simplicial meshes with a piecewise-constant metric, plus scalar data."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Optional

import numpy as np

from ._io import atomic_write_text


class MeshValidationError(ValueError):
    """Raised when a mesh violates one of its structural invariants."""


def _triu_index(n):
    return np.triu_indices(n)


def metric_from_triu(values, n):
    """Expand row-major upper-triangle storage into full symmetric matrices."""
    values = np.asarray(values, dtype=float)
    r, c = _triu_index(n)
    out = np.zeros(values.shape[:-1] + (n, n))
    out[..., r, c] = values
    out[..., c, r] = values
    return out


def metric_to_triu(g):
    n = g.shape[-1]
    r, c = _triu_index(n)
    return g[..., r, c]


@dataclass(frozen=True, eq=False)
class SimplicialMesh:
    """Discrete compact manifold with boundary.

    ``cell_metric`` holds one full ``n x n`` SPD matrix per cell. Boundary
    facets carry the index of their unique parent cell.
    """

    dimension: int
    vertices: np.ndarray
    cells: np.ndarray
    facets: np.ndarray
    facet_cells: np.ndarray
    cell_metric: np.ndarray
    fields: Dict[str, np.ndarray] = field(default_factory=dict)
    boundary_fields: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("vertices", "cells", "facets", "facet_cells", "cell_metric"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        bverts = np.unique(self.facets) if len(self.facets) else np.zeros(0, dtype=np.int64)
        object.__setattr__(self, "_bverts", bverts)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def boundary_vertices(self) -> np.ndarray:
        """Sorted indices of vertices incident to a boundary facet."""
        return self._bverts

    @property
    def interior_vertices(self) -> np.ndarray:
        mask = np.ones(self.n_vertices, dtype=bool)
        mask[self._bverts] = False
        return np.flatnonzero(mask)

    @property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self._bverts] = True
        return mask

    @property
    def boundary_position(self) -> np.ndarray:
        """Global vertex index -> position in the boundary ordering (-1 inside)."""
        pos = -np.ones(self.n_vertices, dtype=np.int64)
        pos[self._bverts] = np.arange(len(self._bverts))
        return pos

    def edge_matrices(self):
        x = self.vertices[self.cells]
        return np.swapaxes(x[:, 1:, :] - x[:, :1, :], 1, 2)

    def euclidean_volumes(self):
        det = np.linalg.det(self.edge_matrices())
        return np.abs(det) / math.factorial(self.dimension)

    def metric_volumes(self):
        return np.sqrt(np.linalg.det(self.cell_metric)) * self.euclidean_volumes()

    def facet_tangents(self):
        y = self.vertices[self.facets]
        return np.swapaxes(y[:, 1:, :] - y[:, :1, :], 1, 2)

    def facet_areas(self):
        """Induced-metric area of each boundary facet."""
        t = self.facet_tangents()
        g = self.cell_metric[self.facet_cells]
        gram = np.einsum("fai,fab,fbj->fij", t, g, t)
        return np.sqrt(np.abs(np.linalg.det(gram))) / math.factorial(self.dimension - 1)

    def with_metric(self, cell_metric):
        return SimplicialMesh(self.dimension, self.vertices.copy(), self.cells.copy(),
                              self.facets.copy(), self.facet_cells.copy(),
                              np.array(cell_metric, dtype=float),
                              dict(self.fields), dict(self.boundary_fields))

    def with_fields(self, fields=None, boundary_fields=None):
        return SimplicialMesh(self.dimension, self.vertices.copy(), self.cells.copy(),
                              self.facets.copy(), self.facet_cells.copy(),
                              self.cell_metric.copy(),
                              dict(self.fields if fields is None else fields),
                              dict(self.boundary_fields if boundary_fields is None
                                   else boundary_fields))

    def vertex_adjacency(self):
        """Sparse boolean vertex-vertex adjacency through shared cells."""
        from scipy.sparse import coo_matrix

        k = self.dimension + 1
        rows = np.repeat(self.cells, k, axis=1).ravel()
        cols = np.tile(self.cells, (1, k)).ravel()
        keep = rows != cols
        adj = coo_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])),
                         shape=(self.n_vertices,) * 2).tocsr()
        adj.data[:] = 1.0
        return adj


def build_mesh(vertices, cells, facets, facet_cells, cell_metric=None, fields=None,
               boundary_fields=None, dimension=None, validate=True) -> SimplicialMesh:
    vertices = np.array(vertices, dtype=float)
    if vertices.ndim != 2:
        raise MeshValidationError("vertices must be a 2-d array")
    n = int(dimension if dimension is not None else vertices.shape[1])
    cells = np.array(cells, dtype=np.int64).reshape(-1, n + 1)
    facets = np.array(facets, dtype=np.int64).reshape(-1, n)
    facet_cells = np.array(facet_cells, dtype=np.int64).reshape(-1)
    if cell_metric is None:
        cell_metric = np.broadcast_to(np.eye(n), (len(cells), n, n)).copy()
    else:
        cell_metric = np.array(cell_metric, dtype=float)
    mesh = SimplicialMesh(n, vertices, cells, facets, facet_cells, cell_metric,
                          {k: np.array(v, dtype=float) for k, v in (fields or {}).items()},
                          {k: np.array(v, dtype=float) for k, v in (boundary_fields or {}).items()})
    if validate:
        validate_mesh(mesh)
    return mesh


def _boundary_faces(cells, n):
    """Faces incident to exactly one cell, as sorted tuples -> parent cell."""
    faces = {}
    for ci, cell in enumerate(cells.tolist()):
        for face in combinations(sorted(cell), n):
            faces.setdefault(face, []).append(ci)
    return {f: c[0] for f, c in faces.items() if len(c) == 1}, faces


def validate_mesh(mesh: SimplicialMesh) -> None:
    n = mesh.dimension
    if n < 3:
        raise MeshValidationError(f"dimension must be >= 3, got {n}")
    if mesh.vertices.shape[1] != n:
        raise MeshValidationError("vertex coordinates do not match dimension")
    if not np.all(np.isfinite(mesh.vertices)):
        raise MeshValidationError("non-finite vertex coordinate")
    nv = mesh.n_vertices
    for name, arr in (("cell", mesh.cells), ("facet", mesh.facets)):
        bad = np.flatnonzero(np.any((arr < 0) | (arr >= nv), axis=1))
        if len(bad):
            raise MeshValidationError(f"{name} {bad[0]} has a vertex index out of range")
    bad = np.flatnonzero((mesh.facet_cells < 0) | (mesh.facet_cells >= mesh.n_cells))
    if len(bad):
        raise MeshValidationError(f"facet {bad[0]} has a parent cell index out of range")
    if len(mesh.facet_cells) != len(mesh.facets):
        raise MeshValidationError("facet parent list length mismatch")
    if mesh.cell_metric.shape != (mesh.n_cells, n, n):
        raise MeshValidationError("cell_metric has the wrong shape")

    g = mesh.cell_metric
    asym = np.abs(g - np.swapaxes(g, 1, 2)).max(axis=(1, 2)) if len(g) else np.zeros(0)
    bad = np.flatnonzero(asym > 1e-12)
    if len(bad):
        raise MeshValidationError(f"cell {bad[0]} metric is not symmetric")
    for ci in range(len(g)):
        try:
            np.linalg.cholesky(g[ci])
        except np.linalg.LinAlgError:
            raise MeshValidationError(f"cell {ci} metric is not positive definite") from None

    vol = mesh.metric_volumes()
    bad = np.flatnonzero(~(vol > 0))
    if len(bad):
        raise MeshValidationError(f"cell {bad[0]} has non-positive volume")

    topo, _ = _boundary_faces(mesh.cells, n)
    seen = set()
    for fi, (facet, ci) in enumerate(zip(mesh.facets.tolist(), mesh.facet_cells.tolist())):
        key = tuple(sorted(facet))
        if len(set(key)) != n:
            raise MeshValidationError(f"facet {fi} repeats a vertex")
        if not set(key) <= set(mesh.cells[ci].tolist()):
            raise MeshValidationError(f"facet {fi} is not a face of its parent cell {ci}")
        if key not in topo:
            raise MeshValidationError(f"facet {fi} is shared by more than one cell")
        if key in seen:
            raise MeshValidationError(f"facet {fi} is listed twice")
        seen.add(key)
    if len(seen) != len(topo):
        missing = sorted(set(topo) - seen)[0]
        raise MeshValidationError(f"boundary face {list(missing)} is missing from boundary_facets")

    for name, arr in mesh.fields.items():
        if arr.shape != (nv,) or not np.all(np.isfinite(arr)):
            raise MeshValidationError(f"field {name!r} must hold one finite value per vertex")
    nb = len(mesh.boundary_vertices)
    for name, arr in mesh.boundary_fields.items():
        if arr.shape != (nb,) or not np.all(np.isfinite(arr)):
            raise MeshValidationError(
                f"boundary field {name!r} must hold one finite value per boundary vertex")


def boundary_facets_from_cells(cells, n):
    """Recover (facets, parent cells) for a cell list, oriented as in the cell."""
    topo, _ = _boundary_faces(np.asarray(cells), n)
    keys = sorted(topo)
    facets = np.array(keys, dtype=np.int64).reshape(-1, n)
    parents = np.array([topo[k] for k in keys], dtype=np.int64)
    return facets, parents


# ---------------------------------------------------------------- fields

def check_field(mesh: SimplicialMesh, values, name="field") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(mesh.n_vertices, float(arr))
    if arr.shape != (mesh.n_vertices,):
        raise ValueError(f"{name} has length {arr.shape}, expected {mesh.n_vertices}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def check_boundary_field(mesh: SimplicialMesh, values, name="boundary field") -> np.ndarray:
    nb = len(mesh.boundary_vertices)
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        arr = np.full(nb, float(arr))
    if arr.shape != (nb,):
        raise ValueError(f"{name} has length {arr.shape}, expected {nb}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def integrate(mesh: SimplicialMesh, f) -> float:
    """Integral of a P1 vertex field using cell vertex averages."""
    f = check_field(mesh, f)
    return float(np.dot(mesh.metric_volumes(), f[mesh.cells].mean(axis=1)))


def boundary_integrate(mesh: SimplicialMesh, f) -> float:
    f = check_boundary_field(mesh, f)
    pos = mesh.boundary_position[mesh.facets]
    return float(np.dot(mesh.facet_areas(), f[pos].mean(axis=1)))


# ---------------------------------------------------------------- problem

@dataclass(frozen=True, eq=False)
class YamabeProblem:
    """Mesh plus scalar curvature (per vertex) and mean curvature (per boundary vertex)."""

    mesh: SimplicialMesh
    scalar_curvature: np.ndarray
    mean_curvature: np.ndarray

    def __post_init__(self):
        s = check_field(self.mesh, self.scalar_curvature, "scalar_curvature")
        h = check_boundary_field(self.mesh, self.mean_curvature, "mean_curvature")
        object.__setattr__(self, "scalar_curvature", s)
        object.__setattr__(self, "mean_curvature", h)

    @property
    def n(self) -> int:
        return self.mesh.dimension

    @property
    def a(self) -> float:
        return 4.0 * (self.n - 1) / (self.n - 2)

    @property
    def p(self) -> float:
        return 2.0 * self.n / (self.n - 2)

    @property
    def robin_coeff(self) -> np.ndarray:
        """Boundary weight of the weak form: a * 2/(p-2) * h."""
        return self.a * 2.0 / (self.p - 2.0) * self.mean_curvature

    def replace(self, mesh=None, scalar_curvature=None, mean_curvature=None):
        return YamabeProblem(self.mesh if mesh is None else mesh,
                             self.scalar_curvature if scalar_curvature is None else scalar_curvature,
                             self.mean_curvature if mean_curvature is None else mean_curvature)

    @classmethod
    def from_mesh(cls, mesh: SimplicialMesh, scalar="S", mean="h"):
        s = mesh.fields.get(scalar, np.zeros(mesh.n_vertices))
        h = mesh.boundary_fields.get(mean, np.zeros(len(mesh.boundary_vertices)))
        return cls(mesh, s, h)


# ---------------------------------------------------------------- file format

def mesh_to_dict(mesh: SimplicialMesh) -> dict:
    n = mesh.dimension
    out = {
        "dimension": n,
        "vertices": mesh.vertices.tolist(),
        "cells": mesh.cells.tolist(),
        "boundary_facets": [{"vertices": f, "cell": c}
                            for f, c in zip(mesh.facets.tolist(), mesh.facet_cells.tolist())],
    }
    if not np.array_equal(mesh.cell_metric, np.broadcast_to(np.eye(n), mesh.cell_metric.shape)):
        out["cell_metric"] = metric_to_triu(mesh.cell_metric).tolist()
    if mesh.fields:
        out["fields"] = {k: v.tolist() for k, v in sorted(mesh.fields.items())}
    if mesh.boundary_fields:
        out["boundary_fields"] = {k: v.tolist() for k, v in sorted(mesh.boundary_fields.items())}
    return out


def mesh_from_dict(data: dict, validate=True) -> SimplicialMesh:
    try:
        n = int(data["dimension"])
        vertices = np.array(data["vertices"], dtype=float).reshape(-1, n)
        cells = data["cells"]
        bf = data["boundary_facets"]
        facets = [f["vertices"] for f in bf]
        parents = [f["cell"] for f in bf]
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshValidationError(f"malformed mesh data: {exc}") from exc
    for i, c in enumerate(cells):
        if len(c) != n + 1:
            raise MeshValidationError(f"cell {i} must list {n + 1} vertices")
    for i, f in enumerate(facets):
        if len(f) != n:
            raise MeshValidationError(f"facet {i} must list {n} vertices")
    metric = None
    if "cell_metric" in data:
        tri = np.array(data["cell_metric"], dtype=float)
        if tri.shape != (len(cells), n * (n + 1) // 2):
            raise MeshValidationError("cell_metric must hold n(n+1)/2 values per cell")
        metric = metric_from_triu(tri, n)
    return build_mesh(vertices, cells, facets, parents, metric,
                      fields=data.get("fields"), boundary_fields=data.get("boundary_fields"),
                      dimension=n, validate=validate)


def load_mesh(path, validate=True) -> SimplicialMesh:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MeshValidationError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise MeshValidationError(f"{path}: top level must be a JSON object")
    return mesh_from_dict(data, validate=validate)


def save_mesh(mesh: SimplicialMesh, path) -> None:
    atomic_write_text(path, json.dumps(mesh_to_dict(mesh)))


def meshes_equal(a: SimplicialMesh, b: SimplicialMesh) -> bool:
    if a.dimension != b.dimension:
        return False
    for name in ("vertices", "cells", "facets", "facet_cells", "cell_metric"):
        if not np.array_equal(getattr(a, name), getattr(b, name)):
            return False
    for x, y in ((a.fields, b.fields), (a.boundary_fields, b.boundary_fields)):
        if set(x) != set(y) or any(not np.array_equal(x[k], y[k]) for k in x):
            return False
    return True


# ---------------------------------------------------------------- refinement

# child tets of the red split; local ids 0-3 are corners, 4.. are edge midpoints
_EDGES = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def refine_uniform(mesh: SimplicialMesh, fields: Optional[dict] = None):
    """Red refinement of a tetrahedral mesh.

    Returns ``(fine_mesh, prolongation)`` where ``prolongation`` is a sparse
    matrix mapping coarse vertex fields to fine ones by linear interpolation.
    Vertex and boundary fields stored on the mesh are interpolated too.
    """
    from scipy.sparse import coo_matrix

    if mesh.dimension != 3:
        raise ValueError("refine_uniform supports dimension 3 only")
    nv = mesh.n_vertices
    cells = mesh.cells
    pairs = np.sort(cells[:, _EDGES].reshape(-1, 2), axis=1)
    uniq, inverse = np.unique(pairs, axis=0, return_inverse=True)
    inverse = inverse.reshape(len(cells), 6)
    mid = nv + inverse  # global ids of the six midpoints per cell
    verts = np.vstack([mesh.vertices, 0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]])])

    rows = np.concatenate([np.arange(nv), nv + np.arange(len(uniq)), nv + np.arange(len(uniq))])
    cols = np.concatenate([np.arange(nv), uniq[:, 0], uniq[:, 1]])
    vals = np.concatenate([np.ones(nv), np.full(2 * len(uniq), 0.5)])
    prolong = coo_matrix((vals, (rows, cols)), shape=(len(verts), nv)).tocsr()

    v0, v1, v2, v3 = cells.T
    m01, m02, m03, m12, m13, m23 = mid.T
    corners = [np.stack(c, axis=1) for c in (
        (v0, m01, m02, m03), (m01, v1, m12, m13), (m02, m12, v2, m23), (m03, m13, m23, v3))]
    # inner octahedron: split along its shortest diagonal
    diags = [(m01, m23), (m02, m13), (m03, m12)]
    lens = np.stack([np.linalg.norm(verts[a] - verts[b], axis=1) for a, b in diags], axis=1)
    choice = np.argmin(lens + 1e-12 * np.arange(3), axis=1)
    octa = [np.zeros((len(cells), 4), dtype=np.int64) for _ in range(4)]
    for d, (a, b) in enumerate(diags):
        sel = choice == d
        ring = {0: (m02, m03, m13, m12), 1: (m01, m03, m23, m12), 2: (m01, m02, m23, m13)}[d]
        for k in range(4):
            r0, r1 = ring[k], ring[(k + 1) % 4]
            octa[k][sel] = np.stack([a[sel], b[sel], r0[sel], r1[sel]], axis=1)
    children = np.concatenate(corners + octa, axis=0)
    parent = np.tile(np.arange(len(cells)), 8)
    order = np.argsort(parent, kind="stable")
    children, parent = children[order], parent[order]
    # fix orientation so every child has positive Euclidean determinant
    x = verts[children]
    det = np.linalg.det(np.swapaxes(x[:, 1:] - x[:, :1], 1, 2))
    neg = det < 0
    children[neg, 2], children[neg, 3] = children[neg, 3].copy(), children[neg, 2].copy()
    metric = mesh.cell_metric[parent]

    # boundary facets split into 4, parent cell located by vertex-set lookup
    lookup = {}
    for ci, c in enumerate(children.tolist()):
        for face in combinations(sorted(c), 3):
            lookup.setdefault(face, ci)
    edge_id = {tuple(e): nv + i for i, e in enumerate(uniq.tolist())}

    def m(a, b):
        return edge_id[(a, b) if a < b else (b, a)]

    new_facets, new_parents = [], []
    for f in mesh.facets.tolist():
        a, b, c = f
        ab, bc, ca = m(a, b), m(b, c), m(c, a)
        for tri in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)):
            new_facets.append(tri)
            new_parents.append(lookup[tuple(sorted(tri))])

    fine_fields = {k: prolong @ v for k, v in mesh.fields.items()}
    if fields:
        fine_fields.update({k: prolong @ np.asarray(v, dtype=float) for k, v in fields.items()})
    fine = build_mesh(verts, children, new_facets, new_parents, metric, fields=fine_fields,
                      dimension=3, validate=False)
    if mesh.boundary_fields:
        full = {}
        for k, v in mesh.boundary_fields.items():
            w = np.zeros(nv)
            w[mesh.boundary_vertices] = v
            full[k] = (prolong @ w)[fine.boundary_vertices]
        fine = fine.with_fields(boundary_fields=full)
    return fine, prolong
