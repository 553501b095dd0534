"""``translator-lab`` command line: solve, diagnose, grassmann, growth.

Exit codes: 0 success, 1 failed check or non-convergence, 2 usage or I/O error.
Every subcommand that writes files also writes ``config.json``, the fully
resolved configuration, into its output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import grassmann as gm
from . import immersion as imm
from . import solver

log = logging.getLogger("translator_lab")

DEFAULT_SEED = 42


class UsageError(Exception):
    """Bad input; maps to exit status 2."""


# -- config handling ---------------------------------------------------------

def _load_json(path, what):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None


def resolve_config(args, keys) -> dict:
    """Values from ``--config`` overridden by any flag given on the command line."""
    config = dict(_load_json(args.config, "config file")) if args.config else {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            config[key] = value
    return config


def _write_config(out: Path, config: dict):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(diag._jsonable(config), indent=2, sort_keys=True) + "\n")


# -- solve -------------------------------------------------------------------

def _axes(domain, grid):
    if isinstance(grid, int):
        grid = [grid] * len(domain)
    if len(grid) != len(domain):
        raise UsageError("grid and domain dimensions differ")
    return tuple(np.linspace(float(a), float(b), int(k)) for (a, b), k in zip(domain, grid))


def boundary_values(spec, axes, V) -> np.ndarray:
    """Full-grid boundary array from a problem's boundary specification."""
    coords = np.meshgrid(*axes, indexing="ij")
    if spec == "exact:grim_reaper":
        if len(axes) != 1:
            raise UsageError("exact:grim_reaper needs a one-dimensional domain")
        m = len(V) - 1
        if m == 1:
            return solver.grim_reaper_reference(coords[0])
        if m == 2:
            return solver.rotated_grim_reaper(coords[0], math.atan2(V[2], V[1]))
        raise UsageError("exact:grim_reaper supports m = 1 or 2")
    if spec == "exact:bowl":
        r = np.sqrt(sum(c * c for c in coords))
        return solver.bowl_reference(r, len(axes))
    if isinstance(spec, dict) and "affine" in spec:
        aff = spec["affine"]
        const = np.atleast_1d(np.asarray(aff.get("constant", 0.0), dtype=float))
        lin = np.atleast_2d(np.asarray(aff["linear"], dtype=float))
        X = np.stack(coords, axis=-1)
        return const + X @ lin.T
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    raise UsageError(f"unknown boundary specification: {spec!r}")


def cmd_solve(args) -> int:
    problem = _load_json(args.problem, "problem file")
    config = {**problem, **resolve_config(args, ["grid", "out"])}
    config.setdefault("out", "out")
    try:
        domain = config["domain"]
        V = np.asarray(config["V"], dtype=float)
        grid = config["grid"]
        bspec = config["boundary"]
    except KeyError as exc:
        raise UsageError(f"problem file lacks field {exc}") from None
    V = V / np.linalg.norm(V)
    axes = _axes(domain, grid)
    values = boundary_values(bspec, axes, V)
    settings = solver.SolverConfig(**config.get("solver", {}))
    m = 1 if values.ndim == len(axes) else values.shape[-1]
    vertical = m == 1 and np.allclose(V, np.eye(len(axes) + 1)[-1])
    formulation = config.get("formulation", "codim1" if vertical else "system")
    config["formulation"] = formulation
    out = Path(config["out"])
    _write_config(out, config)
    bd = solver.BoundaryData(values)
    try:
        if formulation == "codim1":
            result = solver.solve_codim1(axes, bd, V, settings)
        else:
            result = solver.solve_system(axes, bd, V, settings)
    except (solver.NonConvergenceError, solver.SingularJacobianError) as exc:
        record = {"converged": False, "error": str(exc),
                  "residual_history": getattr(exc, "residual_history", [])}
        (out / "solver_log.json").write_text(json.dumps(diag._jsonable(record), indent=2) + "\n")
        print(f"solve failed: {exc}", file=sys.stderr)
        return 1
    imm.write_patch(result.patch, out / "patch.json")
    record = {"converged": True, "formulation": result.formulation, "iterations": result.iterations,
              "residual": result.residual, "residual_history": result.residual_history}
    (out / "solver_log.json").write_text(json.dumps(diag._jsonable(record), indent=2) + "\n")
    print(f"converged in {result.iterations} iterations, residual {result.residual:.3e}")
    return 0


# -- diagnose ----------------------------------------------------------------

VARIATIONAL_CHECKS = ("second_variation", "first_variation", "stability", "minimality")
VARIATIONAL_ANCHORS = {
    "second_variation": "d^2/ds^2 F(X + s phi nu) = -int phi (L phi + |B|^2 phi) e^f dmu",
    "first_variation": "dF/ds = 0 at a translator",
    "stability": "int phi (-L phi - |B|^2 phi) e^f dmu >= 0",
    "minimality": "F(graph(u + psi)) >= F(graph(u))",
}


def _centre_bump(patch):
    phi = np.ones(patch.shape)
    for t in diag._local_coords(patch, 2.0 / 3.0):
        phi = phi * diag.bump(t)
    return phi


def variational_checks(patch, names, seed: int) -> list:
    """Variational probes expressed as report checks (codimension one only)."""
    out = []
    count = int(np.prod(patch.shape))
    if {"second_variation", "first_variation"} & set(names):
        sv = diag.second_variation_check(patch, _centre_bump(patch))
        if "second_variation" in names:
            out.append(diag.Check("second_variation", VARIATIONAL_ANCHORS["second_variation"],
                                  sv.rel_err, 1e-2, count))
        if "first_variation" in names:
            out.append(diag.Check("first_variation", VARIATIONAL_ANCHORS["first_variation"],
                                  abs(sv.first_variation), 1e-6 * sv.weighted_volume, count,
                                  scale=sv.weighted_volume))
    if "stability" in names:
        pr = diag.stability_rayleigh_probe(patch, 100, seed)
        out.append(diag.Check("stability", VARIATIONAL_ANCHORS["stability"], max(0.0, -pr.minimum),
                              1e-6, count))
    if "minimality" in names:
        res = diag.minimality_competitor_test(patch, 200, 0.1, seed)
        out.append(diag.Check("minimality", VARIATIONAL_ANCHORS["minimality"], max(0.0, -res.min_gap),
                              1e-8, count))
    return out


def cmd_diagnose(args) -> int:
    config = resolve_config(args, ["patch", "checks", "assume_translator", "seed", "out"])
    config.setdefault("seed", DEFAULT_SEED)
    config.setdefault("out", "diagnostics")
    if "patch" not in config:
        raise UsageError("diagnose needs --patch")
    patch_path = Path(config["patch"])
    if not patch_path.is_file():
        raise UsageError(f"patch file not found: {patch_path}")
    patch = imm.read_patch(patch_path)
    checks = config.get("checks")
    if isinstance(checks, str):
        checks = [c.strip() for c in checks.split(",") if c.strip()]
        config["checks"] = checks
    known = diag.IDENTITY_CHECKS + diag.INEQUALITY_CHECKS + VARIATIONAL_CHECKS
    if checks is not None:
        unknown = [c for c in checks if c not in known]
        if unknown:
            raise UsageError(f"unknown checks: {', '.join(unknown)}")
    suite_checks = None if checks is None else [c for c in checks if c not in VARIATIONAL_CHECKS]
    var_names = [] if checks is None else [c for c in checks if c in VARIATIONAL_CHECKS]
    if var_names and not (patch.m == 1 and np.allclose(patch.V, np.eye(patch.n + 1)[-1])):
        raise UsageError("variational checks need m = 1 and V = eps_(n+1)")
    assume = True if config.get("assume_translator") else None
    out = Path(config["out"])
    _write_config(out, config)
    try:
        if suite_checks == []:
            report = diag.DiagnosticsReport([], diag.grid_info(patch))
        else:
            report = diag.full_report(patch, suite_checks, assume)
    except diag.NotATranslatorError as exc:
        print(f"diagnose: {exc}", file=sys.stderr)
        return 1
    if var_names:
        report.checks.extend(variational_checks(patch, var_names, int(config["seed"])))
    report.provenance["patch"] = diag.patch_digest(patch)
    # file locations do not influence results (the patch is hashed by content),
    # so they stay out of the config hash
    report.provenance["config"] = diag.config_digest(
        {k: v for k, v in config.items() if k not in ("out", "patch")})
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.max_violation:.3e} <= {c.tolerance:.3e}")
    return 0 if report.passed else 1


# -- grassmann ---------------------------------------------------------------

def _parse_matrix(text, what):
    if text.startswith("@"):
        text = Path(text[1:]).read_text()
    try:
        arr = np.array(json.loads(text), dtype=float, ndmin=2)
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UsageError(f"malformed {what}: {exc}") from None
    if arr.ndim != 2 or not np.all(np.isfinite(arr)):
        raise UsageError(f"malformed {what}: expected a finite 2-D matrix")
    return arr


def _plane_quantities(P, P0) -> dict:
    angles = gm.jordan_angles(P, P0)
    w = gm.pairing_w(P, P0)
    record = {"theta": angles.theta.tolist(), "w": w, "v": None, "h": None}
    if w > 0:
        v = 1.0 / w
        record["v"] = v
        if v < 2.0:
            record["h"] = float(gm.h_function(v))
    return record


def cmd_grassmann(args) -> int:
    result = {}
    if args.thresholds:
        t = gm.rigidity_thresholds()
        result["thresholds"] = {"v0": t.v0, "v0_digits": str(gm.v0_exact(30)),
                                "u2_bound": t.u2_bound, "u3_bound": t.u3_bound,
                                "h_at_v0": float(gm.h_function(t.v0))}
    if args.z is not None:
        Z = _parse_matrix(args.z, "Z matrix")
        try:
            P = gm.GraphCoordinates(Z).subspace()
        except (ValueError, gm.DimensionError) as exc:
            raise UsageError(f"malformed Z matrix: {exc}") from None
        result.update(_plane_quantities(P, gm.Subspace.coordinate(P.n, P.m)))
    if args.frames is not None:
        P = _parse_matrix(args.frames[0], "frame")
        Q = _parse_matrix(args.frames[1], "frame")
        try:
            result.update(_plane_quantities(gm.Subspace(P), gm.Subspace(Q)))
        except ValueError as exc:
            raise UsageError(f"malformed frames: {exc}") from None
    if not result:
        raise UsageError("grassmann needs --z, --frames or --thresholds")
    text = json.dumps(diag._jsonable(result), indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        _write_config(out, {"z": args.z, "frames": args.frames, "thresholds": args.thresholds})
        (out / "grassmann.json").write_text(text + "\n")
    return 0


# -- growth ------------------------------------------------------------------

def cmd_growth(args) -> int:
    config = resolve_config(args, ["patch", "origin", "steps", "rho_max", "out"])
    config.setdefault("steps", 20)
    config.setdefault("out", "growth")
    if "patch" not in config:
        raise UsageError("growth needs --patch")
    patch_path = Path(config["patch"])
    if not patch_path.is_file():
        raise UsageError(f"patch file not found: {patch_path}")
    patch = imm.read_patch(patch_path)
    origin = config.get("origin")
    if isinstance(origin, str):
        origin = [float(c) for c in origin.split(",")]
        config["origin"] = origin
    out = Path(config["out"])
    _write_config(out, config)
    try:
        prof = diag.volume_growth_profile(patch, origin, int(config["steps"]), config.get("rho_max"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    with (out / "profile.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rho", "vol", "vol_over_rho_n"])
        for row in prof.rows():
            writer.writerow([repr(float(v)) for v in row])
    verdict = {"monotone": prof.monotone, "worst_relative_drop": prof.worst_drop, "slack": 1e-3,
               "truncated": prof.truncated, "inscribed_radius": prof.inscribed_radius}
    (out / "growth.json").write_text(json.dumps(diag._jsonable(verdict), indent=2, sort_keys=True) + "\n")
    if prof.truncated:
        print("warning: requested rho_max exceeds the inscribed conformal radius; truncated",
              file=sys.stderr)
    print(f"monotone: {prof.monotone} (worst drop {prof.worst_drop:.2e})")
    return 0 if prof.monotone else 1


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="translator-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default values for the flags")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("solve", help="solve a Dirichlet problem")
    common(p)
    p.add_argument("--problem", required=True)
    p.add_argument("--grid", type=int, help="nodes per axis (overrides the problem file)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("diagnose", help="run identity, inequality and variational checks")
    common(p)
    p.add_argument("--patch")
    p.add_argument("--checks", help="comma separated check names")
    p.add_argument("--assume-translator", action="store_const", const=True, default=None)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("grassmann", help="angles, w, v, h of a plane, or the thresholds")
    p.add_argument("--z", help="JSON matrix Z (or @file) of the graph plane")
    p.add_argument("--frames", nargs=2, metavar=("P", "Q"), help="two JSON frames (or @files)")
    p.add_argument("--thresholds", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_grassmann)

    p = sub.add_parser("growth", help="conformal volume growth profile")
    common(p)
    p.add_argument("--patch")
    p.add_argument("--origin", help="comma separated ambient point")
    p.add_argument("--steps", type=int)
    p.add_argument("--rho-max", type=float, dest="rho_max")
    p.set_defaults(func=cmd_growth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
