"""Test geometries: a tetrahedralized unit ball and curvature data on it.

The ball is built from the 20 cones (center + icosahedron face). Each cone is
split into tetrahedra and octahedra, and every octahedron is split into 8
tetrahedra around its center. After a radial blend onto the sphere, vertex
positions are relaxed so that every edge weight of the P1 stiffness matrix is
strictly positive. The stiffness is then an M-matrix, which the monotone
iteration relies on.
"""

from __future__ import annotations

import functools
import itertools
import logging

import numpy as np
from scipy.optimize import minimize

from .assembly import (SparseOperator, lumped_boundary_areas, lumped_volumes, mmatrix_report,
                       stiffness_matrix)
from .conformal import normal_derivative
from .mesh import SimplicialMesh, YamabeProblem, boundary_facets_from_cells, build_mesh

log = logging.getLogger(__name__)

_T = (1 + 5 ** 0.5) / 2
ICO_VERTICES = np.array([
    [-1, _T, 0], [1, _T, 0], [-1, -_T, 0], [1, -_T, 0], [0, -1, _T], [0, 1, _T],
    [0, -1, -_T], [0, 1, -_T], [_T, 0, -1], [_T, 0, 1], [-_T, 0, -1], [-_T, 0, 1]], float)
ICO_VERTICES /= np.linalg.norm(ICO_VERTICES, axis=1)[:, None]
ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
    [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
    [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
_FACE_NORMALS = ICO_VERTICES[ICO_FACES].mean(axis=1)
_FACE_NORMALS /= np.linalg.norm(_FACE_NORMALS, axis=1)[:, None]
_INRADIUS = float(ICO_VERTICES[ICO_FACES[0]].mean(axis=0) @ _FACE_NORMALS[0])

GRID_OF_LEVEL = {1: 3, 2: 6, 3: 12, 4: 24}
CASES = ("ball", "const", "cap-negative", "signed-mean", "manufactured")

_E4 = np.eye(4, dtype=int)
_LI = np.array([0, 0, 0, 1, 1, 2])
_LJ = np.array([1, 2, 3, 2, 3, 3])
_D = np.vstack([-np.ones(3), np.eye(3)])


def _compositions(total, parts=4):
    for c in itertools.product(range(total + 1), repeat=parts - 1):
        if sum(c) <= total:
            yield np.array(c + (total - sum(c),))


def _cone_lattice(L):
    """Vertices and tetrahedra of the subdivided icosahedral cones (flat faces)."""
    key2id, pts, cells = {}, [], []

    def vid(face, coef2):
        # coef2: twice the barycentric coordinates over (center, A, B, C); the center
        # contributes nothing to the position, so it is dropped from the key
        key = tuple(sorted((int(face[i - 1]), int(c)) for i, c in enumerate(coef2) if c and i > 0))
        if key not in key2id:
            key2id[key] = len(pts)
            pts.append(sum(c * ICO_VERTICES[i] for i, c in key) / (2 * L) if key else np.zeros(3))
        return key2id[key]

    for face in ICO_FACES:
        P = lambda b: vid(face, 2 * b)  # noqa: E731
        for q in _compositions(L - 1):
            cells.append([P(q + _E4[a]) for a in range(4)])
        if L >= 3:
            for r in _compositions(L - 3):
                cells.append([P(r + 1 - _E4[a]) for a in range(4)])
        if L >= 2:
            for q in _compositions(L - 2):
                center = vid(face, 2 * q + 1)
                V = {(a, b): P(q + _E4[a] + _E4[b]) for a in range(4) for b in range(a + 1, 4)}
                g = lambda a, b: V[(min(a, b), max(a, b))]  # noqa: E731
                for d in range(4):
                    a, b, c = [i for i in range(4) if i != d]
                    cells.append([center, g(a, b), g(a, c), g(b, c)])
                for a in range(4):
                    b, c, d = [i for i in range(4) if i != a]
                    cells.append([center, g(a, b), g(a, c), g(a, d)])
    return np.array(pts), np.array(cells)


def _blend_to_sphere(X):
    # t: normalized icosahedral "radius" in [0, 1]; outer layers move fully onto spheres
    t = np.max(X @ _FACE_NORMALS.T, axis=1) / _INRADIUS
    r = np.linalg.norm(X, axis=1)
    r[r == 0] = 1.0
    s = t ** 4
    return X * ((1 - s) + s * t / r)[:, None]


def _edges(cells):
    pairs = np.sort(cells[:, np.stack([_LI, _LJ], 1)].reshape(-1, 2), axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    return uniq, inv.reshape(-1, 6)


def _element_terms(P, cells):
    X = P[cells]
    E = np.swapaxes(X[:, 1:] - X[:, :1], 1, 2)
    V = np.linalg.det(E) / 6
    Einv = np.linalg.inv(E)
    G = _D @ Einv
    K = np.einsum("cia,cja->cij", G, G) * V[:, None, None]
    return V, Einv, G, K


def _weight_penalty(P, cells, einv, n_edges, floor, V0, barrier=1e2):
    """Squared shortfall of edge weights below ``floor`` plus a volume barrier.

    Returns the value and its analytic gradient with respect to positions.
    """
    V, Einv, G, K = _element_terms(P, cells)
    w = -np.bincount(einv.ravel(), weights=K[:, _LI, _LJ].ravel(), minlength=n_edges)
    short = np.maximum(floor - w, 0)
    f = np.sum(short ** 2)
    C = np.zeros_like(K)
    c = short[einv]
    C[:, _LI, _LJ] = c
    C[:, _LJ, _LI] = c
    r = np.maximum(0.25 - V / V0, 0)
    f += barrier * np.sum(r ** 2)
    dV = -2 * barrier * r / V0
    EinvT = np.swapaxes(Einv, 1, 2)
    tr = np.einsum("cij,cij->c", C, K) / V
    GCG = np.einsum("cia,cij,cjb->cab", G, C, G)
    gE = V[:, None, None] * (tr[:, None, None] * EinvT - 2 * GCG @ EinvT) \
        + (dV * V)[:, None, None] * EinvT
    gX = np.zeros((len(cells), 4, 3))
    gX[:, 1:, :] = np.swapaxes(gE, 1, 2)
    gX[:, 0, :] = -gX[:, 1:, :].sum(1)
    gP = np.zeros_like(P)
    for k in range(4):
        np.add.at(gP, cells[:, k], gX[:, k])
    return f, gP


def relax_positive_weights(P0, cells, boundary_mask, margin=1e-3, max_iter=4000):
    """Move vertices (boundary ones stay on the unit sphere) until edge weights exceed
    ``margin * edge length``."""
    edges, einv = _edges(cells)
    floor = margin * np.linalg.norm(P0[edges[:, 0]] - P0[edges[:, 1]], axis=1)
    V0 = np.abs(_element_terms(P0, cells)[0])
    bi = np.flatnonzero(boundary_mask)

    def unpack(z):
        P = P0 + z.reshape(-1, 3)
        nb = np.linalg.norm(P[bi], axis=1)
        P[bi] /= nb[:, None]
        return P, nb

    def fun(z):
        P, nb = unpack(z)
        f, gP = _weight_penalty(P, cells, einv, len(edges), floor, V0)
        u, g = P[bi], gP[bi]
        gP[bi] = (g - np.sum(g * u, 1)[:, None] * u) / nb[:, None]
        return f, gP.ravel()

    res = minimize(fun, np.zeros(P0.size), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "maxcor": 30, "ftol": 1e-16, "gtol": 1e-14})
    log.debug("weight relaxation: f=%.3e after %d iterations", res.fun, res.nit)
    return unpack(res.x)[0]


@functools.lru_cache(maxsize=None)
def _ball_arrays(level):
    L = GRID_OF_LEVEL[level]
    X, C = _cone_lattice(L)
    X = _blend_to_sphere(X)
    x = X[C]
    flip = np.linalg.det(np.swapaxes(x[:, 1:] - x[:, :1], 1, 2)) < 0
    C[flip] = C[flip][:, [0, 1, 3, 2]]
    facets, parents = boundary_facets_from_cells(C, 3)
    bmask = np.zeros(len(X), bool)
    bmask[facets.ravel()] = True
    X[bmask] /= np.linalg.norm(X[bmask], axis=1)[:, None]
    X = relax_positive_weights(X, C, bmask)
    return X, C, facets, parents


def ball_mesh(level: int = 2) -> SimplicialMesh:
    """Unit ball mesh at refinement ``level`` (1-4); vertex count grows about 8x per level.

    Levels 1-3 come with a stiffness matrix free of positive off-diagonals.
    """
    if level not in GRID_OF_LEVEL:
        raise ValueError(f"level must be one of {sorted(GRID_OF_LEVEL)}, got {level}")
    X, C, F, P = _ball_arrays(level)
    mesh = build_mesh(X, C, F, P)
    if level <= 3:
        rep = mmatrix_report(SparseOperator(stiffness_matrix(mesh)))
        if not rep["monotone_friendly"]:
            log.warning("ball level %d has %d positive off-diagonals", level,
                        rep["positive_offdiagonal_count"])
    return mesh


def mesh_size(mesh: SimplicialMesh) -> float:
    """Maximum edge length."""
    e = mesh.vertices[mesh.cells[:, _LJ]] - mesh.vertices[mesh.cells[:, _LI]]
    return float(np.sqrt((e ** 2).sum(-1)).max())


# ------------------------------------------------------------------ cases

_DEFAULTS = {
    "ball": {},
    "const": {"s0": -6.0, "h0": 0.0},
    "cap-negative": {"s0": 0.0, "s1": -10.0, "w": 0.4, "qx": 0.0, "qy": 0.0, "qz": 0.0,
                     "h0": 1.0},
    "signed-mean": {"s0": -6.0},
    "manufactured": {"eps": 0.1, "lam": 1.0, "discrete": 1.0},
}


def case_defaults(name):
    if name not in _DEFAULTS:
        raise ValueError(f"unknown gallery case {name!r}; choose from {', '.join(CASES)}")
    return dict(_DEFAULTS[name])


def manufactured_solution(mesh, eps):
    r2 = np.sum(np.asarray(mesh.vertices) ** 2, axis=1)
    return 1.0 + eps * (1.0 - r2)


def manufactured_data(mesh, eps, lam, discrete=True):
    """Scalar and mean curvature for which ``u* = 1 + eps (1 - |x|^2)`` solves the
    Yamabe problem with constant ``lam``.

    With ``discrete`` the data come from the discrete operators, so ``u*`` solves the
    discrete system exactly; otherwise the continuum formulas are sampled.
    """
    n = mesh.dimension
    a = 4.0 * (n - 1) / (n - 2)
    p = 2.0 * n / (n - 2)
    u = manufactured_solution(mesh, eps)
    bv = mesh.boundary_vertices
    if not discrete:
        # Laplacian of u* is -2 n eps; outward derivative on the unit sphere is -2 eps
        S = lam * u ** (p - 2) - a * 2 * n * eps / u
        h = np.full(len(bv), -(p - 2) / 2 * (-2 * eps) / u[bv])
        return S, h
    m = lumped_volumes(mesh)
    Ku = a * (stiffness_matrix(mesh) @ u)
    S = (lam * u ** (p - 1) - Ku / m) / u
    h = -(p - 2) / 2 * normal_derivative(mesh, u) / u[bv]
    # boundary rows also carry the Robin term a (2/(p-2)) h u on the lumped boundary area
    mb = lumped_boundary_areas(mesh)
    S[bv] -= a * 2 / (p - 2) * h * mb / m[bv]
    return S, h


def make_case(name: str, level: int = 2, params: dict | None = None) -> SimplicialMesh:
    """Ball mesh carrying fields ``S`` (vertices) and ``h`` (boundary vertices)."""
    opts = case_defaults(name)
    for k, v in (params or {}).items():
        if k not in opts:
            raise ValueError(f"case {name!r} has no parameter {k!r} (known: {sorted(opts)})")
        opts[k] = float(v)
    mesh = ball_mesh(level)
    X = np.asarray(mesh.vertices)
    bv = mesh.boundary_vertices
    nv, nb = mesh.n_vertices, len(bv)
    fields = {}
    if name == "ball":
        S, h = np.zeros(nv), np.zeros(nb)
    elif name == "const":
        S, h = np.full(nv, opts["s0"]), np.full(nb, opts["h0"])
    elif name == "cap-negative":
        q = np.array([opts["qx"], opts["qy"], opts["qz"]])
        S = opts["s0"] + opts["s1"] * np.exp(-np.sum((X - q) ** 2, 1) / opts["w"] ** 2)
        h = np.full(nb, opts["h0"])
    elif name == "signed-mean":
        S, h = np.full(nv, opts["s0"]), X[bv, 2].copy()
    else:
        S, h = manufactured_data(mesh, opts["eps"], opts["lam"], bool(opts["discrete"]))
        fields["u_star"] = manufactured_solution(mesh, opts["eps"])
    fields["S"] = S
    return mesh.with_fields(fields, {"h": h})


def case_problem(name, level=2, params=None) -> YamabeProblem:
    return YamabeProblem.from_mesh(make_case(name, level, params))
