"""Conjugate gradients, positivity probes and the first Robin eigenpair."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import SparseOperator, conformal_laplacian, lumped_volumes
from .mesh import YamabeProblem

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """A linear or eigen solve failed to meet its contract."""


class ConvergenceError(SolverError):
    def __init__(self, msg, iterations=None, residual=None):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


class IndefiniteOperatorError(SolverError):
    pass


def _as_matrix(op):
    return op.matrix if isinstance(op, SparseOperator) else sp.csr_matrix(op)


def cg_solve(op, rhs, tol=1e-10, max_iter=None, x0=None, return_info=False):
    """Jacobi-preconditioned conjugate gradients.

    Stops once ``||op x - rhs|| <= tol * ||rhs||``. A non-positive curvature
    direction raises :class:`IndefiniteOperatorError`.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = _as_matrix(op)
    b = np.asarray(rhs, dtype=float)
    n = len(b)
    if max_iter is None:
        max_iter = max(10 * n, 100)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        x = np.zeros(n)
        return (x, {"iterations": 0, "residual": 0.0}) if return_info else x
    d = A.diagonal()
    if np.any(d <= 0):
        raise IndefiniteOperatorError(f"non-positive diagonal entry at row {int(np.argmin(d))}")
    dinv = 1.0 / d
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    target = tol * bnorm
    res = np.linalg.norm(r)
    it = 0
    while res > target:
        if it >= max_iter:
            raise ConvergenceError(
                f"CG did not converge in {it} iterations (relative residual {res / bnorm:.3e})",
                it, res / bnorm)
        Ap = A @ p
        curv = p @ Ap
        if curv <= 0:
            raise IndefiniteOperatorError(f"negative curvature direction at iteration {it}")
        alpha = rz / curv
        x += alpha * p
        r -= alpha * Ap
        it += 1
        if it % 50 == 0:
            r = b - A @ x  # refresh against drift
        res = np.linalg.norm(r)
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if return_info:
        return x, {"iterations": it, "residual": res / bnorm}
    return x


def spd_probe(op, trials=100, seed=0) -> bool:
    """Randomized check that ``v^T op v > 1e-14 ||v||^2``.

    The constant vector is always included as one of the probes, since it is
    the natural kernel candidate for P1 operators.
    """
    A = _as_matrix(op)
    rng = np.random.default_rng(seed)
    n = A.shape[0]
    probes = [np.ones(n)] + [rng.standard_normal(n) for _ in range(max(trials - 1, 0))]
    for v in probes:
        if v @ (A @ v) <= 1e-14 * (v @ v):
            return False
    return True


@dataclass
class EigenPair:
    """First eigenpair: ``L phi = eta M phi`` with ``M`` the lumped mass."""

    eta: float
    phi: np.ndarray
    residual: float
    iterations: int = 0
    rayleigh: float = float("nan")


def gershgorin_lower_bound(L, m) -> float:
    """Lower bound for the spectrum of ``M^{-1} L`` with diagonal ``M``."""
    L = sp.csr_matrix(L)
    d = L.diagonal()
    absrow = np.asarray(abs(L).sum(axis=1)).ravel()
    radius = absrow - np.abs(d)
    return float(np.min((d - radius) / m))


def smallest_generalized_eigenpair(L, m, tol=1e-8, max_iter=5000, x0=None, cg_tol=None,
                                   require_positive=True):
    """Smallest eigenpair of ``L x = eta diag(m) x`` by shifted inverse iteration.

    The shift sits strictly below a Gershgorin bound so every inner system is
    SPD and can be handed to :func:`cg_solve`.
    """
    L = sp.csr_matrix(L)
    m = np.asarray(m, dtype=float)
    n = len(m)
    lb = gershgorin_lower_bound(L, m)
    sigma = lb - max(1.0, 1e-3 * abs(lb))
    A = (L - sp.diags(sigma * m)).tocsr()
    inner = min(1e-12, tol * 1e-3) if cg_tol is None else cg_tol
    x = np.ones(n) if x0 is None else np.array(x0, dtype=float)
    x /= np.sqrt(x @ (m * x))

    def rayleigh(v):
        return float((v @ (L @ v)) / (v @ (m * v)))

    eta = rayleigh(x)
    res = np.inf
    for it in range(1, max_iter + 1):
        r = L @ x - eta * m * x
        res = float(np.sqrt(r @ (r / m)) / np.sqrt(x @ (m * x)))
        if res <= tol:
            break
        y = cg_solve(A, m * x, tol=inner, x0=x * (1.0 / max(eta - sigma, 1e-300)))
        x = y / np.sqrt(y @ (m * y))
        eta = rayleigh(x)
    else:
        raise ConvergenceError(f"inverse iteration stagnated (residual {res:.3e})", it, res)
    k = int(np.argmax(np.abs(x)))
    x = x / x[k]
    if require_positive and np.any(x <= 0):
        bad = int(np.argmin(x))
        raise SolverError(f"first eigenvector is not positive (vertex {bad}, value {x[bad]:.3e});"
                          " the mesh is likely too coarse")
    return EigenPair(eta=eta, phi=x, residual=res, iterations=it, rayleigh=rayleigh(x))


def smallest_robin_eigenpair(problem: YamabeProblem, tol=1e-8, shift=0.0, x0=None) -> EigenPair:
    """First eigenpair of the conformal Laplacian with the Robin condition."""
    L = conformal_laplacian(problem, shift).matrix
    m = lumped_volumes(problem.mesh)
    return smallest_generalized_eigenpair(L, m, tol=tol, x0=x0)
