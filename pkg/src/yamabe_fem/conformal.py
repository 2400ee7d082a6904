"""Conformal change of a discrete metric and the induced curvature laws."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import barycentric_gradients, lumped_boundary_areas, lumped_volumes, stiffness_matrix
from .mesh import YamabeProblem, check_field


@dataclass(frozen=True)
class ConformalFactor:
    """Positive vertex field ``u`` defining ``g~ = u^(p-2) g``."""

    u: np.ndarray
    exponent: float

    @classmethod
    def of(cls, problem: YamabeProblem, u):
        u = check_field(problem.mesh, u, "conformal factor")
        if np.any(u <= 0):
            raise ValueError(f"conformal factor must be positive (min {u.min():.3e} at vertex"
                             f" {int(np.argmin(u))})")
        return cls(u=u, exponent=problem.p - 2.0)


def _factor(problem, u):
    if isinstance(u, ConformalFactor):
        return u.u
    return ConformalFactor.of(problem, u).u


def facet_normal_derivative(mesh, u):
    """Per-facet ``du/dnu`` from the parent cell's P1 gradient and metric unit normal."""
    u = np.asarray(u, dtype=float)
    cells = mesh.facet_cells
    grads = barycentric_gradients(mesh)[cells]            # (f, n+1, n)
    du = np.einsum("fi,fia->fa", u[mesh.cells[cells]], grads)
    # Euclidean normal covector: annihilates the facet tangents
    t = mesh.facet_tangents()                             # (f, n, n-1)
    if mesh.dimension == 3:
        N = np.cross(t[:, :, 0], t[:, :, 1])
    else:
        N = np.array([np.linalg.svd(ti.T)[2][-1] for ti in t])
    # orient outward: away from the vertex of the parent cell not on the facet
    y0 = mesh.vertices[mesh.facets[:, 0]]
    centroid = mesh.vertices[mesh.cells[cells]].mean(axis=1)
    sign = np.sign(np.einsum("fa,fa->f", N, y0 - centroid))
    N = N * sign[:, None]
    ginv = np.linalg.inv(mesh.cell_metric[cells])
    gN = np.einsum("fab,fb->fa", ginv, N)
    return np.einsum("fa,fa->f", du, gN) / np.sqrt(np.einsum("fa,fa->f", N, gN))


def normal_derivative(mesh, u):
    """Area-weighted vertex average of the facet normal derivatives (boundary ordering)."""
    dn = facet_normal_derivative(mesh, u)
    area = mesh.facet_areas()
    pos = mesh.boundary_position[mesh.facets]
    n = mesh.dimension
    nb = len(mesh.boundary_vertices)
    num = np.bincount(pos.ravel(), weights=np.repeat(area * dn, n), minlength=nb)
    den = np.bincount(pos.ravel(), weights=np.repeat(area, n), minlength=nb)
    return num / den


def _flux(problem, u, flux):
    if flux is None:
        return normal_derivative(problem.mesh, u)
    return np.broadcast_to(np.asarray(flux, dtype=float), problem.mesh.boundary_vertices.shape)


def conformal_scalar(problem: YamabeProblem, u, flux=None) -> np.ndarray:
    """Scalar curvature of ``u^(p-2) g`` per vertex.

    At boundary vertices the boundary flux ``a du/dnu`` is removed from the
    lumped Laplacian before dividing, so the value stays bounded as the mesh
    is refined. ``flux`` overrides the recovered ``du/dnu`` (boundary
    ordering), e.g. with the Neumann data a weak solve imposed.
    """
    u = _factor(problem, u)
    mesh = problem.mesh
    m = lumped_volumes(mesh)
    lap = problem.a * (stiffness_matrix(mesh) @ u)
    bv = mesh.boundary_vertices
    lap[bv] -= problem.a * _flux(problem, u, flux) * lumped_boundary_areas(mesh)
    return u ** (1.0 - problem.p) * (lap / m + problem.scalar_curvature * u)


def conformal_mean(problem: YamabeProblem, u, flux=None, power=None) -> np.ndarray:
    """Mean curvature of ``u^(p-2) g`` per boundary vertex.

    ``((p-2)/2) u^power (du/dnu + (2/(p-2)) h u)`` with ``power = 2/p`` by default.
    Sign and zero set do not depend on ``power``. ``power = -p/2`` is the value
    that keeps the Robin quotient invariant, and :func:`apply_conformal` uses it.
    """
    u = _factor(problem, u)
    p = problem.p
    power = 2.0 / p if power is None else power
    ub = u[problem.mesh.boundary_vertices]
    dn = _flux(problem, u, flux)
    return 0.5 * (p - 2.0) * ub ** power * (dn + 2.0 / (p - 2.0) * problem.mean_curvature * ub)


def cell_mean(mesh, u) -> np.ndarray:
    """Geometric mean of ``u`` over each cell's vertices.

    Multiplicative, so successive conformal changes by ``u`` then ``v`` give the
    same metric as one change by ``u * v``.
    """
    return np.exp(np.log(u[mesh.cells]).mean(axis=1))


def conformal_metric(problem: YamabeProblem, u) -> np.ndarray:
    u = _factor(problem, u)
    ubar = cell_mean(problem.mesh, u)
    return problem.mesh.cell_metric * (ubar ** (problem.p - 2.0))[:, None, None]


def apply_conformal(problem: YamabeProblem, u, flux=None) -> YamabeProblem:
    """New problem for the metric ``(cell_mean u)^(p-2) g`` with transformed curvatures.

    The pointwise laws are rescaled by the ratio of ``u``-weighted old lumped
    masses to the new ones (``u^p m / m~`` inside, ``u^(2(n-1)/(n-2)) m_b / m_b~``
    on the boundary, both equal to one for constant ``u``), and the mean curvature
    uses the power ``-p/2``. With that choice the new discrete potential is exactly
    the ground-state transform of the old operator by ``u``, so the first Robin
    eigenvalue keeps its sign and only the edge weights differ by ``O(h)``.
    """
    u = _factor(problem, u)
    mesh = problem.mesh
    p, n = problem.p, mesh.dimension
    new_mesh = mesh.with_metric(conformal_metric(problem, u))
    vol_ratio = u ** p * lumped_volumes(mesh) / lumped_volumes(new_mesh)
    ub = u[mesh.boundary_vertices]
    area_ratio = (ub ** (2.0 * (n - 1) / (n - 2)) * lumped_boundary_areas(mesh)
                  / lumped_boundary_areas(new_mesh))
    s_new = conformal_scalar(problem, u, flux) * vol_ratio
    h_new = conformal_mean(problem, u, flux, power=-p / 2.0) * area_ratio
    return YamabeProblem(new_mesh, s_new, h_new)


def sign_with_deadband(x, tol):
    return 0 if abs(x) < tol else (1 if x > 0 else -1)


def eta_sign_check(problem: YamabeProblem, u, tol=1e-6, eigen_tol=1e-8) -> dict:
    from .linalg import smallest_robin_eigenpair

    after = apply_conformal(problem, u)
    e0 = smallest_robin_eigenpair(problem, eigen_tol).eta
    e1 = smallest_robin_eigenpair(after, eigen_tol).eta
    s0, s1 = sign_with_deadband(e0, tol), sign_with_deadband(e1, tol)
    return {"eta_before": e0, "eta_after": e1, "sign_before": s0, "sign_after": s1,
            "signs_agree": s0 == s1}
