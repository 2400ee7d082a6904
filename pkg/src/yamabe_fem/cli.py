"""Command-line entry point: ``yamabe-fem {gallery,classify,solve,verify,convergence}``.

Exit codes: 0 success, 2 load or validation failure, 3 solver failure,
4 result outside tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import __version__
from ._io import atomic_write_csv, atomic_write_json, atomic_write_text
from .assembly import lumped_volumes
from .gallery import CASES, GRID_OF_LEVEL, case_defaults, make_case, mesh_size
from .linalg import SolverError
from .mesh import MeshValidationError, YamabeProblem, load_mesh, mesh_to_dict
from .yamabe import Case, classify, newton_polish, solve, verify

log = logging.getLogger("yamabe_fem")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_ACCEPT = 0, 2, 3, 4


class InputError(ValueError):
    """Bad command-line input, config or file."""


# ------------------------------------------------------------------ configuration

@dataclass
class RunConfig:
    mesh: Optional[str] = None
    out: Optional[str] = None
    tol: float = 1e-8
    eigen_tol: float = 1e-8
    cg_tol: float = 1e-10
    deadband: Optional[float] = None
    beta0: Optional[float] = None        # None means automatic
    beta_min: Optional[float] = None
    max_iter: int = 200
    seed: int = 42

    def validate(self):
        for name in ("tol", "eigen_tol", "cg_tol", "deadband", "beta_min"):
            v = getattr(self, name)
            if v is not None and not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise InputError(f"{name} must be a positive number, got {v!r}")
        if self.beta0 is not None and not self.beta0 < 0:
            raise InputError(f"beta0 must be negative or 'auto', got {self.beta0!r}")
        if not isinstance(self.max_iter, int) or self.max_iter < 1:
            raise InputError(f"max_iter must be a positive integer, got {self.max_iter!r}")
        if self.out is not None:
            d = os.path.dirname(os.path.abspath(self.out))
            if not os.path.isdir(d) or not os.access(d, os.W_OK):
                raise InputError(f"output directory {d} is not writable")
        return self


@dataclass
class GalleryCase:
    name: str = "ball"
    level: int = 2
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.name not in CASES:
            raise InputError(f"unknown case {self.name!r}; choose from {', '.join(CASES)}")
        if self.level not in GRID_OF_LEVEL:
            raise InputError(f"level must be one of {sorted(GRID_OF_LEVEL)}, got {self.level}")
        known = case_defaults(self.name)
        for k in self.params:
            if k not in known:
                raise InputError(f"case {self.name!r} has no parameter {k!r} "
                                 f"(known: {', '.join(sorted(known)) or 'none'})")
        return self


def _parse_params(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise InputError(f"--param expects KEY=VALUE, got {item!r}")
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise InputError(f"--param {key}: {value!r} is not a number") from None
    return out


def _parse_beta0(text):
    if text is None or str(text).lower() == "auto":
        return None
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}") from None


_CONFIG_KEYS = {f for f in RunConfig.__dataclass_fields__} | {"case", "level", "param", "levels",
                                                               "solution", "lam"}


def _merged(args):
    """Defaults, then the JSON config file, then explicit flags."""
    conf = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                conf = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(conf, dict):
            raise InputError("config file must hold a JSON object")
        unknown = set(conf) - _CONFIG_KEYS
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "beta0" in conf:
            conf["beta0"] = _parse_beta0(conf["beta0"])
    flags = {k: v for k, v in vars(args).items() if v is not None}
    if "beta0" in flags and flags["beta0"] == "auto":
        flags["beta0"] = None
    merged = {**conf, **flags}
    cfg = RunConfig(**{k: merged[k] for k in RunConfig.__dataclass_fields__ if k in merged})
    base = conf.get("param") or {}
    if isinstance(base, list):
        base = _parse_params(base)
    elif isinstance(base, dict):
        base = _parse_params(f"{k}={v}" for k, v in base.items())
    else:
        raise InputError("config 'param' must be an object or a list of KEY=VALUE strings")
    params = {**base, **_parse_params(args.param)}
    case = GalleryCase(merged.get("case", "ball"), int(merged.get("level", 2)), params)
    return cfg.validate(), case, merged


def _problem(cfg: RunConfig, case: GalleryCase, merged) -> YamabeProblem:
    if cfg.mesh:
        try:
            mesh = load_mesh(cfg.mesh)
        except OSError as exc:
            raise InputError(f"cannot open mesh {cfg.mesh}: {exc}") from exc
        if "S" not in mesh.fields:
            raise InputError(f"{cfg.mesh}: missing vertex field 'S'")
        return YamabeProblem.from_mesh(mesh)
    if "case" not in merged:
        raise InputError("give --mesh PATH or --case NAME")
    case.validate()
    return YamabeProblem.from_mesh(make_case(case.name, case.level, case.params))


def _emit(obj, out):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        atomic_write_text(out, text)
    sys.stdout.write(text)


# ------------------------------------------------------------------ commands

def cmd_gallery(cfg, case, merged):
    case.validate()
    if not cfg.out:
        raise InputError("gallery needs --out PATH")
    mesh = make_case(case.name, case.level, case.params)
    data = mesh_to_dict(mesh)
    params = case_defaults(case.name)
    params.update(case.params)
    data["gallery_case"] = {"name": case.name, "level": case.level, "params": params}
    atomic_write_json(cfg.out, data)
    print(json.dumps({"out": cfg.out, "vertices": mesh.n_vertices, "cells": mesh.n_cells,
                      "h": mesh_size(mesh)}, sort_keys=True))
    return EXIT_OK


def cmd_classify(cfg, case, merged):
    problem = _problem(cfg, case, merged)
    label, pair = classify(problem, cfg.deadband, cfg.eigen_tol)
    _emit({"eta1": pair.eta, "case": label.case.value, "phi_min": float(pair.phi.min()),
           "phi_max": float(pair.phi.max()), "eigen_residual": pair.residual,
           "iterations": pair.iterations}, cfg.out)
    return EXIT_OK


def history_rows(report):
    """CSV rows for a solve: monotone steps, or continuation steps in the positive case."""
    if report.case.case is Case.POS:
        header = ["iter", "delta_inf", "chain_violations", "beta", "lambda_beta"]
        rows = [[k, s["delta_inf"], s["chain_violations"], s["beta"], s["lambda_beta"]]
                for k, s in enumerate(report.info.get("continuation", []), 1)]
        return header, rows
    return ["iter", "delta_inf", "chain_violations"], [list(r) for r in report.iteration_history]


def _csv_path(out):
    root, _ = os.path.splitext(out)
    return root + ".csv"


def cmd_solve(cfg, case, merged):
    problem = _problem(cfg, case, merged)
    report = solve(problem, tol=cfg.tol, eigen_tol=cfg.eigen_tol, cg_tol=cfg.cg_tol,
                   deadband=cfg.deadband, beta0=cfg.beta0, beta_min=cfg.beta_min,
                   max_iter=cfg.max_iter)
    data = report.to_dict()
    data["config"] = asdict(cfg)
    ok = report.succeeded(cfg.tol)
    data["accepted"] = ok
    if cfg.out:
        header, rows = history_rows(report)
        atomic_write_csv(_csv_path(cfg.out), header, rows)
        atomic_write_json(cfg.out, data)
    summary = {k: data[k] for k in ("case", "lambda", "eta1", "interior_residual",
                                     "boundary_residual", "min_u", "accepted")}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if ok else EXIT_ACCEPT


def _load_solution(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read solution {path}: {exc}") from exc
    if isinstance(data, list):
        return np.asarray(data, dtype=float), None
    if not isinstance(data, dict) or "u" not in data:
        raise InputError(f"{path}: expected a JSON list or an object with key 'u'")
    return np.asarray(data["u"], dtype=float), data.get("lambda")


def cmd_verify(cfg, case, merged):
    if not merged.get("solution"):
        raise InputError("verify needs --solution PATH")
    problem = _problem(cfg, case, merged)
    u, lam_file = _load_solution(merged["solution"])
    lam = merged.get("lam", lam_file)
    if lam is None:
        raise InputError("no lambda given (--lambda) and none stored in the solution file")
    try:
        rep = verify(problem, u, float(lam))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    ok = rep["interior_max"] <= cfg.tol and rep["boundary_row_max"] <= cfg.tol and rep["min_u"] > 0
    _emit({**rep, "lambda": float(lam), "accepted": ok}, cfg.out)
    return EXIT_OK if ok else EXIT_ACCEPT


def _parse_levels(text):
    try:
        levels = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise InputError(f"--levels expects comma-separated integers, got {text!r}") from None
    if len(levels) < 2:
        raise InputError("convergence needs at least two levels")
    for lv in levels:
        if lv not in GRID_OF_LEVEL:
            raise InputError(f"level {lv} is not available (levels: {sorted(GRID_OF_LEVEL)})")
    return levels


def convergence_table(name, levels, params=None, cfg: Optional[RunConfig] = None):
    """Rows ``(level, h, error, ratio)`` of interior lumped L2 errors against a reference.

    ``manufactured`` uses the continuum data (unless ``discrete=1`` is passed)
    and a fixed-``lam`` Newton solve from ``u = 1``, with ``u*`` as reference.
    ``const`` runs the full solver and compares with the constant solution.
    """
    cfg = cfg or RunConfig()
    params = dict(params or {})
    if name == "manufactured":
        params.setdefault("discrete", 0.0)
    elif name != "const":
        raise InputError(f"no reference solution for case {name!r}; use manufactured or const")
    GalleryCase(name, levels[0], params).validate()
    rows, prev = [], None
    for lv in levels:
        mesh = make_case(name, lv, params)
        problem = YamabeProblem.from_mesh(mesh)
        if name == "manufactured":
            lam = case_defaults(name) | params
            u, info = newton_polish(problem, np.ones(mesh.n_vertices), lam["lam"],
                                    tol=min(cfg.tol, 1e-11))
            if not info["converged"]:
                raise SolverError(f"Newton failed at level {lv}: {info}")
            ref = mesh.fields["u_star"]
        else:
            opts = case_defaults(name) | params
            if opts["h0"] != 0.0 or opts["s0"] > 0.0:
                raise InputError("the const reference needs h0 = 0 and s0 <= 0")
            report = solve(problem, tol=cfg.tol, eigen_tol=cfg.eigen_tol, cg_tol=cfg.cg_tol,
                           max_iter=cfg.max_iter)
            u = report.u
            ref = np.ones_like(u) if opts["s0"] == 0.0 else np.full_like(
                u, (opts["s0"] / report.lam) ** (1.0 / (problem.p - 2.0)))
        m = lumped_volumes(mesh)
        inner = mesh.interior_vertices
        err = float(np.sqrt(np.sum(m[inner] * (u - ref)[inner] ** 2)))
        ratio = prev / err if prev is not None and err > 0 else float("nan")
        rows.append((lv, mesh_size(mesh), err, ratio))
        prev = err
    return rows


def cmd_convergence(cfg, case, merged):
    if "case" not in merged:
        raise InputError("convergence needs --case NAME")
    levels = _parse_levels(merged.get("levels", "1,2,3"))
    rows = convergence_table(case.name, levels, case.params, cfg)
    header = ["level", "h", "interior_l2_error_vs_reference", "ratio"]
    if cfg.out:
        atomic_write_csv(cfg.out, header, [list(r) for r in rows])
    print(",".join(header))
    for r in rows:
        print(",".join(repr(float(x)) if isinstance(x, float) else str(x) for x in r))
    analytic = case.name == "manufactured" and not case.params.get("discrete", 0.0)
    if analytic and any(r[3] < 3.0 for r in rows[1:]):
        return EXIT_ACCEPT
    return EXIT_OK


COMMANDS = {"gallery": cmd_gallery, "classify": cmd_classify, "solve": cmd_solve,
            "verify": cmd_verify, "convergence": cmd_convergence}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("run options")
    g.add_argument("--config", help="JSON file with option defaults; flags override it")
    g.add_argument("--mesh", help="mesh file (JSON)")
    g.add_argument("--out", help="output path")
    g.add_argument("--tol", type=float, help="nonlinear tolerance (default 1e-8)")
    g.add_argument("--eigen-tol", dest="eigen_tol", type=float, help="eigen tolerance (1e-8)")
    g.add_argument("--cg-tol", dest="cg_tol", type=float, help="CG tolerance (1e-10)")
    g.add_argument("--deadband", type=float, help="sign dead-band for classification")
    g.add_argument("--beta0", type=_parse_beta0, help="first perturbation (negative) or 'auto'")
    g.add_argument("--beta-min", dest="beta_min", type=float,
                   help="stop continuation once |beta| is at most this")
    g.add_argument("--max-iter", dest="max_iter", type=int, help="monotone iteration cap (200)")
    g.add_argument("--seed", type=int, help="recorded in outputs (default 42)")
    g.add_argument("--case", choices=CASES, help="gallery case")
    g.add_argument("--level", type=int, help="gallery refinement level 1-4")
    g.add_argument("--param", action="append", metavar="KEY=VALUE", help="case parameter")
    g.add_argument("-v", "--verbose", action="store_true", default=None)

    parser = argparse.ArgumentParser(
        prog="yamabe-fem", description="Boundary Yamabe problem on tetrahedral meshes.",
        epilog="exit codes: 0 success, 2 bad input, 3 solver failure, 4 outside tolerance")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gallery", parents=[common], help="write a gallery mesh with curvature data")
    sub.add_parser("classify", parents=[common], help="sign of the first Robin eigenvalue")
    sub.add_parser("solve", parents=[common], help="solve and write JSON report and CSV history")
    pv = sub.add_parser("verify", parents=[common], help="residuals of a given solution")
    pv.add_argument("--solution", help="JSON list of u values or object with 'u' [and 'lambda']")
    pv.add_argument("--lambda", dest="lam", type=float, help="constant scalar curvature")
    pc = sub.add_parser("convergence", parents=[common], help="refinement sweep as CSV")
    pc.add_argument("--levels", help="comma-separated levels (default 1,2,3)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    verbose = args.verbose
    del args.command, args.verbose
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, case, merged = _merged(args)
        return COMMANDS[command](cfg, case, merged)
    except (InputError, MeshValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
