"""Discrete boundary Yamabe solver.

The unknown is a positive vertex field ``u``. In weak form the equation reads

    a K u + M_S u + a (2/(p-2)) M_b(h) u = lam M u^(p-1)

with lumped interior and boundary masses. The strategy depends on the sign of
the first Robin eigenvalue ``eta_1``:

* ZERO: the first eigenfunction itself, with ``lam = 0``.
* NEG: a constant super-solution above a scaled eigenfunction, then a
  monotone iteration.
* POS: conformal normalizations so that ``h > 0`` and ``S < 0`` somewhere,
  then a sequence of perturbed problems ``S -> S + beta``, ``beta -> 0-``,
  and a final Newton polish.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (conformal_laplacian, lumped_boundary_areas, lumped_volumes,
                       mmatrix_report, robin_operator, stiffness_matrix, SparseOperator)
from .conformal import ConformalFactor, apply_conformal, conformal_mean
from .linalg import (ConvergenceError, SolverError, cg_solve, smallest_generalized_eigenpair,
                     smallest_robin_eigenpair)
from .mesh import YamabeProblem, check_field

log = logging.getLogger(__name__)

CHAIN_SLACK = 1e-10


class StageError(SolverError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, msg):
        super().__init__(f"[{stage}] {msg}")
        self.stage = stage


class SupersolutionError(SolverError):
    """A glued candidate failed the vertexwise super-solution check."""

    def __init__(self, msg, worst_vertex=-1, worst_value=float("nan")):
        super().__init__(msg)
        self.worst_vertex = worst_vertex
        self.worst_value = worst_value


# ------------------------------------------------------------------ types

class Case(str, enum.Enum):
    ZERO = "ZERO"
    NEG = "NEG"
    POS = "POS"


@dataclass
class CaseLabel:
    case: Case
    boundary_normalized: bool = False
    scalar_normalized: bool = False

    def to_dict(self):
        return {"case": self.case.value, "boundary_normalized": self.boundary_normalized,
                "scalar_normalized": self.scalar_normalized}


@dataclass
class BracketPair:
    u_minus: np.ndarray
    u_plus: np.ndarray
    lam: float
    shift_A: float

    def __post_init__(self):
        self.u_minus = np.asarray(self.u_minus, dtype=float)
        self.u_plus = np.asarray(self.u_plus, dtype=float)
        if np.any(self.u_minus < 0):
            raise ValueError("u_minus must be nonnegative")
        if np.any(self.u_minus > self.u_plus + CHAIN_SLACK):
            bad = int(np.argmax(self.u_minus - self.u_plus))
            raise ValueError(f"u_minus exceeds u_plus at vertex {bad}")
        if not np.any(self.u_minus > 0):
            raise ValueError("u_minus is identically zero")


@dataclass
class SolveReport:
    case: CaseLabel
    lam: float
    u: np.ndarray
    conformal_factors: list
    interior_residual: float
    boundary_residual: float
    min_u: float
    iteration_history: list = field(default_factory=list)
    beta_trajectory: list = field(default_factory=list)
    eta1: float = float("nan")
    verification: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def succeeded(self, tol) -> bool:
        return bool(self.interior_residual <= tol and self.boundary_residual <= tol
                    and self.min_u > 0)

    def to_dict(self):
        return {
            "case": self.case.to_dict(),
            "lambda": float(self.lam),
            "eta1": float(self.eta1),
            "u": [float(x) for x in self.u],
            "conformal_factors": [[float(x) for x in f] for f in self.conformal_factors],
            "interior_residual": float(self.interior_residual),
            "boundary_residual": float(self.boundary_residual),
            "min_u": float(self.min_u),
            "iteration_history": [[int(k), float(d), int(c)] for k, d, c in self.iteration_history],
            "beta_trajectory": [[float(b), float(v)] for b, v in self.beta_trajectory],
            "verification": {k: float(v) for k, v in self.verification.items()},
            "info": _jsonable(self.info),
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)) and not isinstance(obj, bool):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ------------------------------------------------------------------ residuals

def default_deadband(problem: YamabeProblem) -> float:
    return 1e-8 * (1.0 + float(np.max(np.abs(problem.scalar_curvature))))


def residual_rows(problem: YamabeProblem, u, lam, beta=0.0) -> np.ndarray:
    """Weak residual ``L_beta u - lam M u^(p-1)``, one entry per vertex."""
    L = conformal_laplacian(problem, beta).matrix
    m = lumped_volumes(problem.mesh)
    return L @ u - lam * m * u ** (problem.p - 1.0)


def verify(problem: YamabeProblem, u, lam) -> dict:
    """Residuals of ``(u, lam)`` as a solution.

    ``interior_max``/``interior_l2`` use interior rows divided by the lumped
    volume. ``boundary_max`` is the largest transformed mean curvature.
    ``boundary_row_max`` is the same scaled residual on boundary rows, which
    carry the Robin condition in weak form.
    """
    u = check_field(problem.mesh, u, "u")
    if np.any(u <= 0):
        raise ValueError(f"u must be positive (min {u.min():.3e} at vertex {int(np.argmin(u))})")
    m = lumped_volumes(problem.mesh)
    r = np.abs(residual_rows(problem, u, lam)) / m
    inner = problem.mesh.interior_vertices
    bv = problem.mesh.boundary_vertices
    ri = r[inner]
    return {
        "interior_max": float(ri.max()) if len(ri) else 0.0,
        "interior_l2": float(np.sqrt(np.sum(m[inner] * ri ** 2))),
        "boundary_max": float(np.max(np.abs(conformal_mean(problem, u)))),
        "boundary_row_max": float(r[bv].max()),
        "min_u": float(u.min()),
    }


# ------------------------------------------------------------------ classification

def classify(problem: YamabeProblem, tol=None, eigen_tol=1e-8):
    """Label by the sign of the first Robin eigenvalue, with dead-band ``tol``."""
    tol = default_deadband(problem) if tol is None else tol
    pair = smallest_robin_eigenpair(problem, eigen_tol)
    if abs(pair.eta) <= tol:
        case = Case.ZERO
    elif pair.eta < 0:
        case = Case.NEG
    else:
        case = Case.POS
    return CaseLabel(case), pair


# ------------------------------------------------------------------ monotone iteration

def choose_shift(problem: YamabeProblem, lam, u_min, u_max, beta=0.0) -> float:
    """Shift ``A`` with ``dF/du + A >= 1`` on the bracket, ``F = -(S+beta) u + lam u^(p-1)``."""
    if u_min > u_max:
        raise ValueError("u_min must not exceed u_max")
    p = problem.p
    ref = u_min if lam > 0 else u_max
    worst = float(np.max(problem.scalar_curvature)) + beta - (p - 1.0) * lam * ref ** (p - 2.0)
    return max(0.0, worst + 1.0)


def _step_operator(problem, A):
    return robin_operator(problem, np.full(problem.mesh.n_vertices, float(A)), problem.robin_coeff)


def monotone_iterate(problem: YamabeProblem, lam, bracket: BracketPair, tol=1e-8, max_iter=200,
                     beta=0.0, cg_tol=1e-12, adaptive_shift=True):
    """Iterate ``(aK + A M + M_b) u_k = M (F(u_{k-1}) + A u_{k-1})`` from ``u_plus``.

    Returns ``(u, history)`` with history rows ``(k, max|u_k - u_{k-1}|, violations)``.
    A violation is a vertex where the chain ``u_minus <= u_k <= u_{k-1}`` fails
    by more than 1e-10. With ``adaptive_shift`` the shift is recomputed over
    ``[min u_minus, max u_{k-1}]``. That interval shrinks as the iterates
    decrease, so the monotonicity rule stays satisfied.
    """
    c = problem.robin_coeff
    if np.any(c < 0):
        raise SolverError("monotone iteration needs a nonnegative Robin coefficient "
                          f"(min {c.min():.3e}); normalize the boundary first")
    mesh = problem.mesh
    m = lumped_volumes(mesh)
    S = problem.scalar_curvature + beta
    p = problem.p
    lo = float(bracket.u_minus.min())
    A = bracket.shift_A
    op = _step_operator(problem, A)
    u = bracket.u_plus.copy()
    history = []
    for k in range(1, max_iter + 1):
        if adaptive_shift:
            A_new = choose_shift(problem, lam, lo, float(u.max()), beta)
            if A_new != A:
                A, op = A_new, _step_operator(problem, A_new)
        rhs = m * (-S * u + lam * u ** (p - 1.0) + A * u)
        u_new = cg_solve(op, rhs, tol=cg_tol, x0=u)
        bad = (u_new > u + CHAIN_SLACK) | (u_new < bracket.u_minus - CHAIN_SLACK)
        nbad = int(bad.sum())
        if nbad:
            log.warning("monotone chain broken at %d vertices (first %d) in step %d",
                        nbad, int(np.flatnonzero(bad)[0]), k)
        delta = float(np.max(np.abs(u_new - u)))
        history.append((k, delta, nbad))
        u = u_new
        if delta <= tol:
            return u, history
    raise ConvergenceError(f"monotone iteration did not reach {tol:.1e} in {max_iter} steps "
                           f"(last change {history[-1][1]:.3e})", max_iter, history[-1][1])


def check_subsuper(problem, u_minus, u_plus, lam, beta=0.0, slack=CHAIN_SLACK):
    """Vertexwise sub/super inequalities on the scaled weak residual."""
    m = lumped_volumes(problem.mesh)
    r_lo = residual_rows(problem, u_minus, lam, beta) / m
    r_hi = residual_rows(problem, u_plus, lam, beta) / m
    return {
        "sub_ok": bool(np.all(r_lo <= slack)), "sub_worst": float(r_lo.max()),
        "sub_worst_vertex": int(np.argmax(r_lo)),
        "super_ok": bool(np.all(r_hi >= -slack)), "super_worst": float(r_hi.min()),
        "super_worst_vertex": int(np.argmin(r_hi)),
    }


def subsuper_negative(problem: YamabeProblem, eigenpair) -> BracketPair:
    """Bracket for ``eta_1 < 0``: ``lam = eta_1/2``, ``u_- = t phi``, ``u_+ = K_1``."""
    eta, phi = eigenpair.eta, eigenpair.phi
    if eta >= 0:
        raise SolverError(f"negative-case bracket needs eta_1 < 0 (got {eta:.3e})")
    h = problem.mean_curvature
    if np.any(h < 0):
        raise SolverError(f"mean curvature is negative at {int((h < 0).sum())} boundary vertices;"
                          " normalize the boundary first")
    p = problem.p
    lam = eta / 2.0
    u_minus = (0.5 / phi.max()) * phi
    ratio = float(np.min(problem.scalar_curvature)) / lam
    K1 = max(ratio, float(np.max(u_minus)) ** (p - 2.0)) ** (1.0 / (p - 2.0)) + 1.0
    u_plus = np.full_like(u_minus, K1)
    chk = check_subsuper(problem, u_minus, u_plus, lam)
    if not (chk["sub_ok"] and chk["super_ok"]):
        raise SolverError(f"bracket verification failed: {chk}")
    A = choose_shift(problem, lam, float(u_minus.min()), K1)
    return BracketPair(u_minus, u_plus, lam, A)


# ------------------------------------------------------------------ Newton

def newton_polish(problem: YamabeProblem, u0, lam, beta=0.0, tol=1e-11, max_steps=50):
    """Damped Newton on the weak equation at fixed ``lam``.

    Trial steps are halved until the residual norm decreases. Returns
    ``(u, info)``; ``info["converged"]`` is False if the target was not reached.
    A failed line search still counts as converged when the residual is within
    the rounding floor of its own terms (``info["floor"]``).
    """
    L = conformal_laplacian(problem, beta).matrix
    m = lumped_volumes(problem.mesh)
    p = problem.p
    u = np.array(u0, dtype=float)

    def res(v):
        return L @ v - lam * m * v ** (p - 1.0)

    def floor(v):
        terms = np.abs(L) @ np.abs(v) + abs(lam) * m * np.abs(v) ** (p - 1.0)
        return float(64.0 * np.finfo(float).eps * np.max(terms / m))

    r = res(u)
    norm = float(np.max(np.abs(r) / m))
    steps = 0
    while norm > tol and steps < max_steps:
        J = (L - sp.diags((p - 1.0) * lam * m * u ** (p - 2.0))).tocsc()
        try:
            du = spla.splu(J).solve(r)
        except RuntimeError as exc:
            return u, {"converged": False, "steps": steps, "residual": norm,
                       "reason": f"singular Jacobian: {exc}"}
        t = 1.0
        for _ in range(30):
            trial = u - t * du
            if np.all(trial > 0):
                rt = res(trial)
                nt = float(np.max(np.abs(rt) / m))
                if nt < norm:
                    break
            t *= 0.5
        else:
            fl = floor(u)
            return u, {"converged": norm <= fl, "steps": steps, "residual": norm, "floor": fl,
                       "reason": "line search failed"}
        u, r, norm = trial, rt, nt
        steps += 1
    return u, {"converged": norm <= tol, "steps": steps, "residual": norm, "floor": floor(u)}


# ------------------------------------------------------------------ normalizations

def rescale_metric(problem: YamabeProblem, c) -> YamabeProblem:
    """Problem for the metric ``c^2 g``. Curvatures scale as ``S/c^2`` and ``h/c``."""
    mesh = problem.mesh.with_metric(problem.mesh.cell_metric * c * c)
    return YamabeProblem(mesh, problem.scalar_curvature / (c * c), problem.mean_curvature / c)


def normalize_boundary_positive(problem: YamabeProblem, sign=1.0, H=None, cg_tol=1e-12,
                                H_floor=0.5):
    """Conformal factor ``u ~ c^(1/2) e^W`` making the mean curvature have sign ``sign``.

    The metric is first scaled by ``c^2`` so that ``(2/(p-2)) sup|h| <= 1``.
    ``W`` then solves ``-Laplace W + W = 0`` with ``dW/dnu = sign*H`` (weakly).
    The sign flips once ``c H > (2/(p-2)) sup(-sign h)``. By default ``H`` is twice
    that threshold but at least ``H_floor``: a gentler factor keeps the discrete
    eigenvalue closer to its continuum invariance.
    Returns the factor relative to the input metric and the transformed problem.
    """
    p = problem.p
    hmax = float(np.max(np.abs(problem.mean_curvature))) * 2.0 / (p - 2.0)
    c = max(1.0, hmax)
    if H is None:
        need = 2.0 * max(0.0, float(np.max(-sign * problem.mean_curvature))) / ((p - 2.0) * c)
        H = max(2.0 * need, H_floor)
    scaled = rescale_metric(problem, c)
    mesh = scaled.mesh
    op = robin_operator(scaled, np.ones(mesh.n_vertices), np.zeros(len(mesh.boundary_vertices)),
                        coeff=1.0)
    load = np.zeros(mesh.n_vertices)
    load[mesh.boundary_vertices] = sign * H * lumped_boundary_areas(mesh)
    W = cg_solve(op, load, tol=cg_tol)
    # dropping the mean of W rescales the metric by a constant only
    W -= (lumped_volumes(mesh) @ W) / lumped_volumes(mesh).sum()
    u = c ** (2.0 / (p - 2.0)) * np.exp(W)
    factor = ConformalFactor.of(problem, u)
    # weak Neumann data of u in the input metric: du/dnu = c * sign * H * u
    flux = c * sign * H * u[mesh.boundary_vertices]
    new = apply_conformal(problem, factor, flux=flux)
    h = new.mean_curvature
    if np.any(sign * h <= 0):
        bad = int(np.argmin(sign * h))
        raise StageError("normalize_boundary", f"transformed mean curvature has the wrong sign at "
                         f"boundary vertex {int(mesh.boundary_vertices[bad])} ({h[bad]:.3e});"
                         " the mesh is too coarse")
    return factor, new


def _graph_depth(mesh):
    """Graph distance of every vertex to the boundary."""
    adj = mesh.vertex_adjacency()
    depth = np.full(mesh.n_vertices, -1)
    front = mesh.boundary_vertices
    depth[front] = 0
    d = 0
    while len(front):
        d += 1
        nxt = np.unique(adj[front].indices)
        nxt = nxt[depth[nxt] < 0]
        depth[nxt] = d
        front = nxt
    return depth


def _pick_center(mesh, values, min_depth=1):
    """Interior vertex minimizing ``values``; ties go to the deepest, then lowest index."""
    depth = _graph_depth(mesh)
    cand = np.flatnonzero(depth >= min_depth)
    if not len(cand):
        raise SolverError("mesh has no vertex at the requested depth from the boundary")
    v = values[cand]
    near = cand[v <= v.min() + 1e-12 * (1.0 + abs(v.min()))]
    best = near[depth[near] == depth[near].max()]
    return int(best.min())


def force_scalar_negative(problem: YamabeProblem, sign=-1.0, C=4.0, cg_tol=1e-12):
    """Conformal factor ``u = u' + C/4`` that makes the scalar curvature have sign
    ``sign`` at one interior vertex.

    ``u'`` solves ``-a Laplace u' = F`` with zero Neumann data and zero lumped mean,
    where ``F = -sign * C * bump + const`` and ``bump`` is a unit-mass spike on
    the 1-ring of the chosen vertex ``q``. ``u'`` scales linearly with ``C``, so
    both checks below (sign at ``q`` and ``u`` in ``[C/8, 3C/8]``) are independent
    of ``C``. ``C`` only sets the overall size of ``u``.
    """
    S = problem.scalar_curvature
    if sign < 0 and np.any(S < 0):
        raise SolverError("scalar curvature is already negative somewhere; nothing to do")
    if sign > 0 and np.any(S > 0):
        raise SolverError("scalar curvature is already positive somewhere; nothing to do")
    mesh = problem.mesh
    m = lumped_volumes(mesh)
    q = _pick_center(mesh, -sign * S, min_depth=2)
    ring = mesh.vertex_adjacency()[q].indices
    bump = np.zeros(mesh.n_vertices)
    bump[ring] = 0.5
    bump[q] = 1.0
    bump /= m @ bump
    vol = m.sum()
    F = sign * C * (bump - 1.0 / vol)
    K = stiffness_matrix(mesh, problem.a)
    # pin vertex q (the full system is singular on constants), then fix the mean
    keep = np.flatnonzero(np.arange(mesh.n_vertices) != q)
    Kr = K[keep][:, keep]
    u_prime = np.zeros(mesh.n_vertices)
    u_prime[keep] = cg_solve(SparseOperator(Kr), (m * F)[keep], tol=cg_tol)
    u_prime -= (m @ u_prime) / vol
    u = u_prime + C / 4.0
    if u.min() < C / 8.0 or u.max() > 3.0 * C / 8.0:
        raise StageError("force_scalar", f"factor range [{u.min():.3e}, {u.max():.3e}] leaves "
                         f"[C/8, 3C/8]; the spike at vertex {q} is too wide for this mesh")
    factor = ConformalFactor.of(problem, u)
    # the Neumann data of the weak solve is exactly zero
    new = apply_conformal(problem, factor, flux=0.0)
    if not sign * new.scalar_curvature[q] > 0:
        raise StageError("force_scalar", f"transformed scalar curvature at vertex {q} is "
                         f"{new.scalar_curvature[q]:.3e}; the spike is too weak for this mesh")
    return factor, new


# ------------------------------------------------------------------ perturbed problem

@dataclass
class Subdomain:
    vertices: np.ndarray
    center: int
    radius: int
    lambda1: float
    criterion: float


def _dirichlet_eigen(mesh, omega, coeff, zero_order=None, tol=1e-10):
    K = stiffness_matrix(mesh, coeff)[omega][:, omega]
    m = lumped_volumes(mesh)[omega]
    if zero_order is not None:
        K = K + sp.diags(zero_order[omega] * m)
    return smallest_generalized_eigenpair(K.tocsr(), m, tol=tol)


def subdomain_criterion(problem, lambda1, beta):
    n, a = problem.n, problem.a
    sup_s = float(np.max(np.abs(problem.scalar_curvature)))
    return a / n - ((n - 2.0) / (2.0 * n) + 1.0) * (sup_s + abs(beta)) / lambda1


def select_subdomain(problem: YamabeProblem, beta, max_radius=None) -> Subdomain:
    """Largest graph ball around ``argmin(S + beta)`` that satisfies the smallness test.

    The ball has no boundary vertex, ``S + beta < 0`` on it, and its first
    Dirichlet eigenvalue of ``-Laplace`` is large enough that the criterion
    value is at least ``a/(2n)``.
    """
    mesh = problem.mesh
    sb = problem.scalar_curvature + beta
    inner = ~mesh.boundary_mask
    if not np.any(sb[inner] < 0):
        raise SolverError("S + beta is nonnegative at every interior vertex")
    center = _pick_center(mesh, sb, min_depth=1)
    adj = mesh.vertex_adjacency()
    target = problem.a / (2.0 * problem.n)
    ball = np.zeros(mesh.n_vertices, bool)
    ball[center] = True
    best = None
    radius = 0
    while True:
        omega = np.flatnonzero(ball)
        lam1 = _dirichlet_eigen(mesh, omega, 1.0).eta
        crit = subdomain_criterion(problem, lam1, beta)
        if crit >= target:
            best = Subdomain(omega, center, radius, lam1, crit)
        if max_radius is not None and radius >= max_radius:
            break
        grown = ball | (adj @ ball.astype(float) > 0)
        if np.any(grown & ~inner) or np.any(sb[grown] >= 0) or grown.sum() == ball.sum():
            break
        ball, radius = grown, radius + 1
    if best is None:
        raise SolverError(f"no graph ball around vertex {center} meets the smallness criterion")
    return best


def local_dirichlet_solve(problem: YamabeProblem, omega, beta, lam, tol=1e-10, max_steps=60):
    """Positive solution of the restricted problem on ``omega``, zero elsewhere.

    Seeds are ``s psi_1`` with ``s`` found by bisection on ``<R(s psi_1), psi_1>``.
    Damped Newton follows. If a seed converges to zero or to a sign-changing
    field, rescaled seeds are tried.
    """
    if lam <= 0:
        raise SolverError("local Dirichlet problem needs lam > 0")
    mesh = problem.mesh
    omega = np.asarray(omega)
    if np.any(mesh.boundary_mask[omega]):
        raise SolverError("subdomain touches the boundary")
    p = problem.p
    m = lumped_volumes(mesh)[omega]
    A = (stiffness_matrix(mesh, problem.a)[omega][:, omega]
         + sp.diags((problem.scalar_curvature[omega] + beta) * m)).tocsr()
    eig = smallest_generalized_eigenpair(A, m, tol=1e-12)
    if eig.eta <= 0:
        raise SolverError(f"restricted operator is not coercive (mu_1 = {eig.eta:.3e})")
    psi = eig.phi

    def R(v):
        return A @ v - lam * m * v ** (p - 1.0)

    def g(s):
        return float(psi @ R(s * psi))

    lo, hi = 1e-8, 1.0
    while g(hi) > 0:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * hi:
            break
    s0 = 0.5 * (lo + hi)
    scale = float(np.max(m))
    for factor in (1.0, 0.8, 1.25, 0.6, 1.6):
        v = s0 * factor * psi
        r = R(v)
        norm = float(np.max(np.abs(r) / m))
        for _ in range(max_steps):
            if norm <= tol:
                break
            J = (A - sp.diags((p - 1.0) * lam * m * np.abs(v) ** (p - 2.0))).tocsc()
            dv = spla.splu(J).solve(r)
            t = 1.0
            while t > 1e-6:
                trial = v - t * dv
                nt = float(np.max(np.abs(R(trial)) / m))
                if nt < norm:
                    break
                t *= 0.5
            else:
                break  # stagnated; try the next seed
            v, norm = trial, nt
            r = R(v)
        if norm <= tol and v.max() > 1e-8 and v.min() >= -1e-12 * max(v.max(), scale):
            u1 = np.zeros(mesh.n_vertices)
            u1[omega] = np.maximum(v, 0.0)
            return u1
    raise SolverError("local Newton found no positive solution from any seed")


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def glue_supersolution(problem: YamabeProblem, u1, phi_scaled, gamma, lam=None, beta=0.0,
                       check=True):
    """Blend ``u1`` (where it dominates) with ``phi_scaled`` (elsewhere).

    With ``d = u1 - phi_scaled``: weight of ``u1`` rises from 0 at ``d = gamma/2`` to 1 at
    ``d = gamma``. Weight of ``phi_scaled`` mirrors it for negative ``d``. The
    remainder goes to ``phi_scaled + gamma``. With ``check`` the result is verified
    vertexwise as a super-solution for ``lam`` and :class:`SupersolutionError`
    is raised on failure.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    u1 = np.asarray(u1, dtype=float)
    phi = np.asarray(phi_scaled, dtype=float)
    d = u1 - phi
    half = 0.5 * gamma
    chi1 = _smoothstep((d - half) / half)
    chi2 = _smoothstep((-d - half) / half)
    chi3 = 1.0 - chi1 - chi2
    glued = chi1 * u1 + chi2 * phi + chi3 * (phi + gamma)
    inside = u1 > 0
    u_plus = np.where(inside, glued, phi)
    u_plus[problem.mesh.boundary_vertices] = phi[problem.mesh.boundary_vertices]
    if check:
        if lam is None:
            raise ValueError("lam is required for the super-solution check")
        r = residual_rows(problem, u_plus, lam, beta) / lumped_volumes(problem.mesh)
        if np.any(r < -CHAIN_SLACK):
            k = int(np.argmin(r))
            raise SupersolutionError(f"glued field is not a super-solution at vertex {k} "
                                     f"(scaled residual {r[k]:.3e})", k, float(r[k]))
    return u_plus


def perturbed_quotient(problem, v, beta=0.0):
    L = conformal_laplacian(problem, beta).matrix
    m = lumped_volumes(problem.mesh)
    return float((v @ (L @ v)) / (m @ np.abs(v) ** problem.p) ** (2.0 / problem.p))


def estimate_lambda_beta(problem: YamabeProblem, beta, tol=1e-12, x0=None, max_iter=500,
                         cg_tol=1e-12):
    """Minimize the perturbed quotient by the normalized fixed point
    ``L_beta v_{k+1} = M v_k^(p-1)``, ``int v^p = 1``.

    Returns ``(lambda_beta, v)``. The result is a local minimum, hence an
    upper bound for the discrete infimum.
    """
    L = conformal_laplacian(problem, beta)
    m = lumped_volumes(problem.mesh)
    p = problem.p

    def normalize(v):
        return v / (m @ v ** p) ** (1.0 / p)

    if x0 is None:
        x0 = smallest_robin_eigenpair(problem, 1e-10, shift=beta).phi
    v = normalize(np.abs(np.asarray(x0, dtype=float)))
    q = perturbed_quotient(problem, v, beta)
    for k in range(1, max_iter + 1):
        w = cg_solve(L, m * v ** (p - 1.0), tol=cg_tol, x0=v / max(q, 1e-300))
        if np.any(w <= 0):
            raise SolverError("fixed-point iterate lost positivity; is eta_1 + beta > 0?")
        w = normalize(w)
        qn = perturbed_quotient(problem, w, beta)
        v, dq, q = w, abs(qn - q), qn
        if dq <= tol:
            return q, v
    raise ConvergenceError(f"quotient fixed point stalled (last change {dq:.3e})", max_iter, dq)


@dataclass
class PerturbedSolution:
    beta: float
    lam: float
    u: np.ndarray
    route: str
    u1: np.ndarray = None
    u_plus: np.ndarray = None
    subdomain: Subdomain = None
    gamma: float = float("nan")
    history: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def ordering(self):
        """Whether ``u1 <= u <= u_plus`` holds vertexwise. Empty unless the sub-super
        route produced ``u``."""
        out = {}
        if self.route != "sub-super":
            return out
        if self.u1 is not None:
            out["u1_below"] = bool(np.all(self.u1 <= self.u + CHAIN_SLACK))
        if self.u_plus is not None:
            out["below_u_plus"] = bool(np.all(self.u <= self.u_plus + CHAIN_SLACK))
        return out


def solve_perturbed(problem: YamabeProblem, beta, tol=1e-8, x0=None, eigenpair=None,
                    max_iter=200, cg_tol=1e-12, gamma0=None, halvings=8):
    """Positive solution of ``-a Lap u + (S + beta) u = lam_beta u^(p-1)`` with the Robin condition.

    The sub/super construction is tried first. If no local solution exists on
    any admissible ball, or the glued super-solution fails verification for
    every ``gamma``, the quotient minimizer is polished by Newton instead. It
    solves the same equation. ``route`` and ``notes`` record what happened.
    """
    h = problem.mean_curvature
    if np.any(h <= 0):
        raise StageError("precondition", "mean curvature must be positive on the whole boundary")
    if eigenpair is None:
        eigenpair = smallest_robin_eigenpair(problem, 1e-10)
    eta = eigenpair.eta
    if eta <= 0:
        raise StageError("precondition", f"eta_1 = {eta:.3e} is not positive")
    eta_b = eta + beta
    if eta_b <= 0:
        raise StageError("precondition", f"eta_1 + beta = {eta_b:.3e} is not positive")
    if not np.any(problem.scalar_curvature[~problem.mesh.boundary_mask] + beta < 0):
        raise StageError("precondition", "S + beta is nonnegative at every interior vertex")
    p = problem.p
    try:
        lam, v = estimate_lambda_beta(problem, beta, tol=min(tol, 1e-12), x0=x0, cg_tol=cg_tol)
    except SolverError as exc:
        raise StageError("lambda_beta", str(exc)) from exc
    # the shifted operator has the same eigenvector; eta shifts by beta exactly
    phi = eigenpair.phi
    bound = eta_b * phi.min() / (2.0 ** (p - 2.0) * lam * np.max(phi ** (p - 1.0)))
    delta = (0.5 * bound) ** (1.0 / (p - 2.0))
    phi_s = delta * phi
    out = PerturbedSolution(beta=beta, lam=lam, u=v, route="")
    u1 = u_plus = None
    try:
        sub = select_subdomain(problem, beta)
        out.subdomain = sub
        for radius in range(sub.radius, -1, -1):
            omega = sub.vertices if radius == sub.radius else \
                select_subdomain(problem, beta, max_radius=radius).vertices
            try:
                u1 = local_dirichlet_solve(problem, omega, beta, lam)
                break
            except SolverError as exc:
                out.notes.append(f"local solve on radius {radius}: {exc}")
        else:
            out.notes.append("no positive local solution on any ball")
    except SolverError as exc:
        out.notes.append(f"subdomain selection failed: {exc}")
    if u1 is not None:
        out.u1 = u1
        gamma = gamma0 if gamma0 is not None else 0.1 * float(phi_s.max())
        for _ in range(halvings + 1):
            try:
                u_plus = glue_supersolution(problem, u1, phi_s, gamma, lam, beta)
                break
            except SupersolutionError as exc:
                last = exc
                gamma *= 0.5
        else:
            out.notes.append(f"glued super-solution rejected after {halvings} halvings: {last}")
    if u_plus is not None:
        out.u_plus, out.gamma = u_plus, gamma
        A = choose_shift(problem, lam, float(u1.min()), float(u_plus.max()), beta)
        try:
            u, hist = monotone_iterate(problem, lam, BracketPair(u1, u_plus, lam, A), tol,
                                       max_iter, beta, cg_tol)
        except SolverError as exc:
            raise StageError("monotone_iterate", str(exc)) from exc
        out.u, out.history, out.route = u, hist, "sub-super"
    else:
        out.route = "quotient-minimizer"
        u, info = newton_polish(problem, v, lam, beta, tol=min(tol, 1e-11))
        if not info["converged"] and info["residual"] > tol:
            raise StageError("perturbed_newton", f"Newton stalled at residual {info['residual']:.3e}")
        out.u = u
    if np.any(out.u <= 0):
        raise StageError("positivity", f"perturbed solution has min {out.u.min():.3e}")
    return out


# ------------------------------------------------------------------ orchestration

def _report(problem, case, lam, u, factors, eta, history=(), traj=(), info=None):
    ver = verify(problem, u, lam)
    total = np.prod(np.vstack(factors + [u]), axis=0) if factors else u
    return SolveReport(case=case, lam=float(lam), u=total, conformal_factors=factors + [u],
                       interior_residual=ver["interior_max"],
                       boundary_residual=ver["boundary_row_max"], min_u=float(total.min()),
                       iteration_history=list(history), beta_trajectory=list(traj), eta1=eta,
                       verification=ver, info=info or {})


def solve(problem: YamabeProblem, tol=1e-8, eigen_tol=1e-8, cg_tol=1e-12, deadband=None,
          beta0=None, beta_min=None, max_iter=200) -> SolveReport:
    """Find ``(lam, u)`` with ``u > 0`` solving the discrete boundary Yamabe problem.

    ``u`` in the report is the product of every conformal factor used, so it
    is relative to the input metric. Residuals are measured on the last
    normalized problem, where the final factor is an exact discrete solution.
    """
    label, pair = classify(problem, deadband, eigen_tol)
    eta0 = pair.eta
    info = {"mmatrix": mmatrix_report(SparseOperator(stiffness_matrix(problem.mesh)))}
    if label.case is Case.ZERO:
        return _report(problem, label, 0.0, pair.phi, [], eta0, info=info)

    factors = []
    current = problem
    if label.case is Case.NEG:
        if np.any(current.mean_curvature < 0):
            f, current = normalize_boundary_positive(current)
            factors.append(f.u)
            label.boundary_normalized = True
            pair = smallest_robin_eigenpair(current, eigen_tol)
        bracket = subsuper_negative(current, pair)
        u, hist = monotone_iterate(current, bracket.lam, bracket, tol, max_iter, cg_tol=cg_tol)
        info["monotone_limit"] = verify(current, u, bracket.lam)
        u, newton = newton_polish(current, u, bracket.lam)
        info["newton"] = newton
        return _report(current, label, bracket.lam, u, factors, eta0, hist, info=info)

    # positive case
    if np.any(current.mean_curvature <= 0):
        f, current = normalize_boundary_positive(current)
        factors.append(f.u)
        label.boundary_normalized = True
    if np.all(current.scalar_curvature >= 0):
        f, current = force_scalar_negative(current)
        factors.append(f.u)
        label.scalar_normalized = True
    if factors:
        pair = smallest_robin_eigenpair(current, eigen_tol)
    eta = pair.eta
    if eta <= 0:
        raise StageError("normalize", f"eta_1 changed sign under normalization ({eta:.3e})")
    beta = -0.5 * eta if beta0 is None else float(beta0)
    stop = 1e-3 * eta if beta_min is None else float(beta_min)
    if beta >= 0:
        raise ValueError("beta0 must be negative")
    lambda_upper = perturbed_quotient(current, np.ones(current.mesh.n_vertices))
    traj, hist, routes, notes, steps = [], [], [], [], []
    x0 = None
    while True:
        sol = solve_perturbed(current, beta, tol, x0=x0, eigenpair=pair, max_iter=max_iter,
                              cg_tol=cg_tol)
        traj.append((beta, sol.lam))
        hist.extend(sol.history)
        routes.append(sol.route)
        notes.extend(sol.notes[-1:])
        steps.append({
            "beta": beta, "lambda_beta": sol.lam, "route": sol.route,
            "delta_inf": float("nan") if x0 is None else float(np.max(np.abs(sol.u - x0))),
            "chain_violations": int(sum(c for _, _, c in sol.history)),
        })
        x0 = sol.u
        if abs(beta) <= stop:
            break
        beta *= 0.5
    lam = traj[-1][1]
    u, newton = newton_polish(current, x0, lam)
    info.update({
        "newton": newton, "perturbed_routes": routes, "notes": notes, "continuation": steps,
        "lambda_upper": lambda_upper, "degraded": not newton["converged"],
        "trajectory_nondecreasing": bool(all(b[1] >= a[1] - 1e-8 for a, b in zip(traj, traj[1:]))),
        "trajectory_bounded": bool(all(v <= lambda_upper + 1e-8 for _, v in traj)),
        "eta1_normalized": eta,
    })
    return _report(current, label, lam, u, factors, eta0, hist, traj, info)
