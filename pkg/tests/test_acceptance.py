"""Acceptance criteria 1-10, one pass/fail line each in the terminal summary.

Run with ``pytest tests/test_acceptance.py`` or ``python tests/test_acceptance.py``.
"""

import sys
import time

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

import conftest
from yamabe_fem.assembly import (conformal_laplacian, lumped_volumes, mmatrix_report, stiffness)
from yamabe_fem.cli import convergence_table
from yamabe_fem.conformal import eta_sign_check
from yamabe_fem.gallery import case_problem
from yamabe_fem.linalg import cg_solve, smallest_robin_eigenpair
from yamabe_fem.mesh import YamabeProblem, boundary_facets_from_cells, build_mesh
from yamabe_fem.yamabe import (Case, classify, estimate_lambda_beta, force_scalar_negative,
                               normalize_boundary_positive, rescale_metric, solve, verify)

Q = 2 ** 0.25


def record(n, ok, detail):
    conftest.ACCEPTANCE_LINES.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def neg_run(const_neg2):
    start = time.perf_counter()
    label, pair = classify(const_neg2)
    report = solve(const_neg2)
    return label, pair, report, time.perf_counter() - start


def test_criterion_1_constant_negative(const_neg2, neg_run):
    label, pair, report, elapsed = neg_run
    n_vertices = const_neg2.mesh.n_vertices
    eta_err = abs(pair.eta + 6.0)
    lam_err = abs(report.lam + 3.0)
    u_err = float(np.max(np.abs(report.u - Q)))
    ok = (n_vertices <= 3000 and label.case is Case.NEG and eta_err <= 1e-8 and lam_err <= 1e-8
          and u_err <= 1e-6 and elapsed <= 30.0)
    record(1, ok, f"vertices={n_vertices} |eta+6|={eta_err:.1e} |lam+3|={lam_err:.1e} "
                  f"max|u-2^(1/4)|={u_err:.1e} time={elapsed:.1f}s")


def test_criterion_2_zero_case():
    report = solve(case_problem("const", 2, {"s0": 0.0, "h0": 0.0}))
    spread = float(report.u.max() - report.u.min())
    ok = report.case.case is Case.ZERO and report.lam == 0.0 and spread <= 1e-8
    record(2, ok, f"case={report.case.case.value} lam={report.lam} spread(u)={spread:.1e}")


def test_criterion_3_shift_identity(cap2):
    worst = 0.0
    for prob in (case_problem("const", 2), cap2):
        eta = smallest_robin_eigenpair(prob).eta
        for beta in (-1.0, -0.1, -0.01):
            shifted = YamabeProblem(prob.mesh, prob.scalar_curvature + beta, prob.mean_curvature)
            worst = max(worst, abs(smallest_robin_eigenpair(shifted).eta - eta - beta))
    record(3, worst <= 1e-7, f"max|eta(S+beta)-eta(S)-beta|={worst:.1e}")


def test_criterion_4_monotone_chain(neg_run, ball1, ball2, ball3):
    report = neg_run[2]
    violations = sum(c for _, _, c in report.iteration_history)
    friendly = []
    for mesh in (ball1, ball2, ball3):
        prob = YamabeProblem(mesh, np.zeros(mesh.n_vertices), np.zeros(len(mesh.boundary_vertices)))
        friendly.append(mmatrix_report(stiffness(prob))["monotone_friendly"])
    ok = violations == 0 and len(report.iteration_history) > 0 and all(friendly)
    record(4, ok, f"iterations={len(report.iteration_history)} chain_violations={violations} "
                  f"m-matrix levels 1-3={friendly}")


def test_criterion_5_sign_invariance():
    agree = 0
    trials = 0
    for s0 in (-6.0, 6.0):
        prob = case_problem("const", 2, {"s0": s0, "h0": 0.0})
        rng = np.random.default_rng(20240 + int(s0))
        for _ in range(10):
            W = rng.standard_normal((3, 3))
            shift = rng.uniform(0, 2 * np.pi, 3)
            u = 1.0 + 0.3 * np.mean(np.sin(prob.mesh.vertices @ W + shift), axis=1)
            rep = eta_sign_check(prob, u, tol=1e-6)
            agree += bool(rep["signs_agree"] and rep["sign_before"] != 0)
            trials += 1
    record(5, agree == trials == 20, f"sign agreement {agree}/{trials}")


def test_criterion_6_normalizations():
    signed = case_problem("signed-mean", 2)
    _, boundary = normalize_boundary_positive(signed)
    frac_h = float(np.mean(boundary.mean_curvature > 0))
    _, forced = force_scalar_negative(case_problem("const", 2, {"s0": 6.0, "h0": 1.0}))
    s_min = float(forced.scalar_curvature.min())
    frac_f = float(np.mean(forced.mean_curvature > 0))
    ok = signed.mean_curvature.min() < 0 < signed.mean_curvature.max() and frac_h == 1.0 \
        and s_min < 0 and frac_f == 1.0
    record(6, ok, f"boundary: h>0 on {100 * frac_h:.0f}%; scalar: min S={s_min:.3g}, "
                  f"h>0 on {100 * frac_f:.0f}%")


def test_criterion_7_positive_pipeline(cap2):
    eta = smallest_robin_eigenpair(cap2).eta
    start = time.perf_counter()
    report = solve(cap2)
    elapsed = time.perf_counter() - start
    lams = [v for _, v in report.beta_trajectory]
    nondecreasing = all(b >= a - 1e-8 for a, b in zip(lams, lams[1:]))
    ok = (eta > 0 and np.all(cap2.mean_curvature == 1.0) and report.case.case is Case.POS
          and nondecreasing and report.lam > 0 and report.min_u > 0
          and report.interior_residual <= 1e-5 and elapsed <= 300.0)
    record(7, ok, f"eta={eta:.3g} steps={len(lams)} nondecreasing={nondecreasing} "
                  f"lam={report.lam:.5g} min_u={report.min_u:.3g} "
                  f"residual={report.interior_residual:.1e} time={elapsed:.0f}s")


def test_criterion_8_lambda_beta_continuity(cap2):
    vol = lumped_volumes(cap2.mesh).sum()
    unit = rescale_metric(cap2, vol ** (-1.0 / 3.0))
    unit_vol = lumped_volumes(unit.mesh).sum()
    lam_a = estimate_lambda_beta(unit, -0.1)[0]
    lam_b = estimate_lambda_beta(unit, -0.05)[0]
    gap = abs(lam_b - lam_a)
    ok = abs(unit_vol - 1.0) <= 1e-12 and gap <= 2 * 0.05 + 1e-6
    record(8, ok, f"volume={unit_vol:.12f} |lam(-0.05)-lam(-0.1)|={gap:.4f} (bound 0.1)")


def test_criterion_9_manufactured_convergence():
    rows = convergence_table("manufactured", [1, 2, 3])
    ratios = [r[3] for r in rows[1:]]
    worst = 0.0
    for level in (1, 2, 3):
        prob = case_problem("manufactured", level)
        ver = verify(prob, prob.mesh.fields["u_star"], 1.0)
        worst = max(worst, ver["interior_max"], ver["boundary_row_max"])
    ok = all(r >= 3.0 for r in ratios) and worst <= 1e-10
    errs = " ".join(f"{r[2]:.2e}" for r in rows)
    record(9, ok, f"errors={errs} ratios={' '.join(f'{r:.2f}' for r in ratios)} "
                  f"discrete residual={worst:.1e}")


def quadrature_stiffness(verts, metric, coeff):
    """Element matrix by a 4-point rule, gradients from inverting the affine map."""
    T = np.hstack([np.ones((4, 1)), verts])
    grads = np.linalg.inv(T)[1:].T  # row k: gradient of barycentric k
    ginv = np.linalg.inv(metric)
    jac = abs(np.linalg.det(verts[1:] - verts[0])) / 6.0
    a, b = 0.5854101966249685, 0.1381966011250105
    points = np.full((4, 4), b) + (a - b) * np.eye(4)
    K = np.zeros((4, 4))
    for lam in points:
        x = lam @ verts
        # gradients of the affine hats, evaluated at the quadrature point
        g_at = np.array([np.linalg.solve(T.T, np.r_[0.0, e]) for e in np.eye(3)]).T
        assert np.allclose(lam, np.linalg.solve(T.T, np.r_[1.0, x]))
        K += 0.25 * jac * np.sqrt(np.linalg.det(metric)) * g_at @ ginv @ g_at.T
    assert np.allclose(g_at, grads)
    return coeff * K


def test_criterion_10_oracles(ball1):
    rng = np.random.default_rng(10)
    verts = np.array([[0.1, 0.0, 0.0], [1.2, 0.1, 0.0], [0.2, 0.9, 0.1], [0.0, 0.3, 1.1]])
    B = rng.standard_normal((3, 3))
    g = B @ B.T + np.eye(3)
    facets, parents = boundary_facets_from_cells(np.array([[0, 1, 2, 3]]), 3)
    mesh = build_mesh(verts, [[0, 1, 2, 3]], facets, parents, np.array([g]))
    prob = YamabeProblem(mesh, np.zeros(4), np.zeros(4))
    K_err = float(np.max(np.abs(stiffness(prob).toarray() - quadrature_stiffness(verts, g, 8.0))))

    C = rng.standard_normal((50, 50))
    A = C @ C.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    cg_err = float(np.max(np.abs(cg_solve(sp.csr_matrix(A), b, tol=1e-12) - np.linalg.solve(A, b))))

    X = ball1.vertices
    eig_err = 0.0
    for S, h in ((np.full(ball1.n_vertices, -6.0), 0.0), (np.sin(2 * X[:, 0]), 1.0),
                 (1.0 + X[:, 2] ** 2, -0.3)):
        p1 = YamabeProblem(ball1, S, np.full(len(ball1.boundary_vertices), h))
        dense = sla.eigh(conformal_laplacian(p1).toarray(), np.diag(lumped_volumes(ball1)),
                         eigvals_only=True, subset_by_index=[0, 0])[0]
        eig_err = max(eig_err, abs(smallest_robin_eigenpair(p1).eta - dense))
    ok = K_err <= 1e-12 and cg_err <= 1e-8 and eig_err <= 1e-6
    record(10, ok, f"stiffness={K_err:.1e} cg={cg_err:.1e} eta={eig_err:.1e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
