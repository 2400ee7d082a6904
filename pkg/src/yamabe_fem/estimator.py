"""Scikit-learn style wrapper around :func:`yamabe_fem.yamabe.solve`."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .mesh import SimplicialMesh, YamabeProblem
from .yamabe import SolveReport, solve, verify


def check_problem(problem) -> YamabeProblem:
    """Accept a :class:`YamabeProblem` or a mesh carrying ``S`` and ``h`` fields."""
    if isinstance(problem, YamabeProblem):
        return problem
    if isinstance(problem, SimplicialMesh):
        if "S" not in problem.fields:
            raise ValueError("mesh has no vertex field 'S' (scalar curvature)")
        return YamabeProblem.from_mesh(problem)
    raise TypeError(f"expected YamabeProblem or SimplicialMesh, got {type(problem).__name__}")


def _check_positive(name, value, allow_none=False):
    if value is None and allow_none:
        return
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")


def check_is_fitted(est):
    if not hasattr(est, "report_"):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit(problem) first")


class YamabeSolver(BaseEstimator):
    """Solve the discrete boundary Yamabe problem for one mesh and curvature data.

    Parameters mirror :func:`yamabe_fem.yamabe.solve`. After :meth:`fit` the
    attributes ``report_`` (a :class:`SolveReport`), ``lambda_`` (the constant
    scalar curvature), ``u_`` (the conformal factor relative to the input metric)
    and ``case_`` (``"NEG"``, ``"ZERO"`` or ``"POS"``) are set.

    Example
    -------
    >>> from yamabe_fem.gallery import case_problem
    >>> est = YamabeSolver(tol=1e-8).fit(case_problem("const", 1))
    >>> round(est.lambda_, 6)
    -3.0
    """

    def __init__(self, tol=1e-8, eigen_tol=1e-8, cg_tol=1e-12, deadband=None, beta0=None,
                 beta_min=None, max_iter=200):
        self.tol = tol
        self.eigen_tol = eigen_tol
        self.cg_tol = cg_tol
        self.deadband = deadband
        self.beta0 = beta0
        self.beta_min = beta_min
        self.max_iter = max_iter

    def _validate_params(self):
        for name in ("tol", "eigen_tol", "cg_tol"):
            _check_positive(name, getattr(self, name))
        _check_positive("deadband", self.deadband, allow_none=True)
        _check_positive("beta_min", self.beta_min, allow_none=True)
        if self.beta0 is not None and not (isinstance(self.beta0, numbers.Real) and self.beta0 < 0):
            raise ValueError(f"beta0 must be negative or None, got {self.beta0!r}")
        if not isinstance(self.max_iter, numbers.Integral) or self.max_iter < 1:
            raise ValueError(f"max_iter must be a positive integer, got {self.max_iter!r}")

    def fit(self, problem, y=None):
        self._validate_params()
        problem = check_problem(problem)
        report = solve(problem, tol=self.tol, eigen_tol=self.eigen_tol, cg_tol=self.cg_tol,
                       deadband=self.deadband, beta0=self.beta0, beta_min=self.beta_min,
                       max_iter=self.max_iter)
        self.problem_ = problem
        self.report_: SolveReport = report
        self.lambda_ = report.lam
        self.u_ = report.u
        self.case_ = report.case.case.value
        self.n_iter_ = len(report.iteration_history)
        return self

    def score(self, problem=None, y=None):
        """Negative interior residual of the fitted solution (higher is better)."""
        check_is_fitted(self)
        if problem is None:
            return -float(self.report_.interior_residual)
        problem = check_problem(problem)
        return -float(verify(problem, self.u_, self.lambda_)["interior_max"])

    def succeeded(self):
        check_is_fitted(self)
        return self.report_.succeeded(self.tol)
