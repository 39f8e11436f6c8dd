"""Command line entry point: ``gradvi {solve,oracle,verify,study}``.

Exit codes: 0 success, 1 invalid input (parse or hypothesis failure),
2 non-convergence, 3 a declared threshold failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .experiments import StudySpec, StudyValidationError, run_study
from .grid import build_grid, write_fields_csv
from .lagrange import (
    check_thresholds,
    complementarity_report,
    describe_line,
    extract_fields,
    lambda_flux_identity_check,
    step2_vi_check,
)
from .oracle import AdmmOptions, IllPosedData, MaxItersExceeded, solve_vi_admm
from .problem import ExpressionError, EvaluationError, Problem, validate_data
from .solver import NonConvergence, SolveOptions, UnderResolvedSchedule, continuation_solve

log = logging.getLogger("gradvi")

EXIT_OK, EXIT_INPUT, EXIT_NONCONV, EXIT_THRESHOLD = 0, 1, 2, 3


class InputError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected INT[,INT], got {text!r}") from None
    if not vals or any(v < 3 for v in vals):
        raise argparse.ArgumentTypeError("grid sizes must be at least 3")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _threshold(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected NAME=VALUE, got {text!r}")
    return name.strip(), float(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradvi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, problem=True):
        if problem:
            p.add_argument("--problem", required=True, type=Path, help="problem JSON file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--n", type=_int_list, help="grid points per axis, INT or INT,INT")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--verbose", "-v", action="store_true")

    def penalty(p):
        p.add_argument("--eps-schedule", type=_float_list, help="decreasing eps list")
        p.add_argument("--r", type=float, default=None, help="gradient penalty exponent")
        p.add_argument("--tol", type=float, default=None, help="Newton residual tolerance")
        p.add_argument("--max-iters", type=int, default=None, help="Newton iterations per eps")
        p.add_argument("--allow-underresolved", action="store_true",
                       help="accept eps below h^2")

    p = sub.add_parser("solve", help="penalty continuation solve")
    common(p)
    penalty(p)

    p = sub.add_parser("oracle", help="ADMM reference solve")
    common(p)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--tol", type=float, default=None, help="relative ADMM residual tolerance")
    p.add_argument("--max-iters", type=int, default=None, help="ADMM iteration limit")

    p = sub.add_parser("verify", help="solve and check the multiplier system")
    common(p)
    penalty(p)
    p.add_argument("--threshold", type=_threshold, action="append", default=[],
                   metavar="NAME=VALUE", help="override a declared threshold")
    p.add_argument("--with-oracle", action="store_true", help="also compare with ADMM")
    p.add_argument("--trials", type=int, default=100, help="random VI trial fields")
    p.add_argument("--debug-lambda-scale", type=float, default=1.0,
                   help=argparse.SUPPRESS)

    p = sub.add_parser("study", help="run a scripted study")
    common(p, problem=False)
    p.add_argument("--spec", required=True, type=Path, help="study JSON file")
    p.add_argument("--eps-schedule", type=_float_list)
    p.add_argument("--r", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    return parser


def _fail(code: int, message: str) -> int:
    print(f"gradvi: {message}", file=sys.stderr)
    return code


def _load_problem(path: Path) -> Problem:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read problem file {path}: {exc}") from None
    try:
        return Problem.from_dict(raw)
    except ExpressionError as exc:
        raise InputError(str(exc)) from None
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"invalid problem file: {exc}") from None


def _validated(path: Path) -> Problem:
    prob = _load_problem(path)
    try:
        report = validate_data(prob)
    except EvaluationError as exc:
        raise InputError(f"data cannot be evaluated: {exc}") from None
    if not report.passed:
        bad = "; ".join(f"{c.name} (worst {c.worst:g} at {c.witness})" for c in report.failures())
        raise InputError(f"hypotheses violated: {bad}")
    return prob


def _shape(args, prob: Problem, default: int):
    n = args.n or [default]
    if len(n) not in (1, prob.dimension):
        raise InputError(f"--n has {len(n)} entries for a {prob.dimension}D problem")
    return n[0] if len(n) == 1 else tuple(n)


def _solve_options(args) -> SolveOptions:
    kw = {"allow_underresolved": args.allow_underresolved}
    if args.tol is not None:
        kw["residual_tol"] = args.tol
    if args.max_iters is not None:
        kw["max_newton_iters"] = args.max_iters
    return SolveOptions(**kw)


def _manifest(out: Path, command: str, config: dict) -> None:
    manifest = {
        "command": command,
        "config": config,
        "versions": {"gradvi": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")


def _run_continuation(args, prob):
    shape = _shape(args, prob, 201)
    grid = build_grid(prob.domain, shape)
    schedule = args.eps_schedule or [1e-1, 1e-2, 1e-3, 1e-4]
    r = 4.0 if args.r is None else args.r
    opts = _solve_options(args)
    config = {"problem": prob.to_dict(), "n": list(grid.shape), "eps_schedule": schedule,
              "r": r, "residual_tol": opts.residual_tol,
              "max_newton_iters": opts.max_newton_iters,
              "allow_underresolved": opts.allow_underresolved, "seed": args.seed}
    try:
        cr = continuation_solve(prob, grid, schedule, r, opts)
    except ValueError as exc:  # includes UnderResolvedSchedule
        raise InputError(str(exc)) from None
    return grid, cr, config


def cmd_solve(args) -> int:
    prob = _validated(args.problem)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        grid, cr, config = _run_continuation(args, prob)
    except NonConvergence as exc:
        if exc.result is not None:
            exc.result.write_monitors(args.out / "monitors.csv")
        return _fail(EXIT_NONCONV, str(exc))
    _manifest(args.out, "solve", config)
    fin = cr.final
    write_fields_csv(args.out / "u_eps.csv", grid, {"u": fin.u}, {"eps": fin.eps})
    write_fields_csv(args.out / "khat.csv", grid, {"khat": fin.khat_nodes}, {"eps": fin.eps})
    write_fields_csv(args.out / "theta.csv", grid, {"theta": fin.theta}, {"eps": fin.eps})
    cr.write_monitors(args.out / "monitors.csv")
    summary = {"eps_final": fin.eps, "converged": [e.converged for e in cr.entries],
               "newton_iters": [e.newton_iters for e in cr.entries],
               "residual_norm": fin.residual_norm}
    if len(cr.converged_entries) >= 2:
        summary["complementarity"] = complementarity_report(extract_fields(cr)).to_dict()
    _write_json(args.out / "summary.json", summary)
    return EXIT_OK


def cmd_oracle(args) -> int:
    prob = _validated(args.problem)
    args.out.mkdir(parents=True, exist_ok=True)
    grid = build_grid(prob.domain, _shape(args, prob, 201))
    kw = {}
    if args.rho is not None:
        kw["rho"] = args.rho
    if args.tol is not None:
        kw["primal_tol"] = kw["dual_tol"] = args.tol
    if args.max_iters is not None:
        kw["max_iters"] = args.max_iters
    try:
        opts = AdmmOptions(**kw)
    except ValueError as exc:
        return _fail(EXIT_INPUT, str(exc))
    config = {"problem": prob.to_dict(), "n": list(grid.shape),
              "admm": {k: getattr(opts, k) for k in opts.__dataclass_fields__}, "seed": args.seed}
    _manifest(args.out, "oracle", config)
    try:
        sol = solve_vi_admm(prob, grid, opts)
        code = EXIT_OK
    except IllPosedData as exc:
        return _fail(EXIT_INPUT, str(exc))
    except MaxItersExceeded as exc:
        sol = exc.solution
        code = _fail(EXIT_NONCONV, f"{exc}; best iterate written, flagged non-converged")
    write_fields_csv(args.out / "u_oracle.csv", grid, {"u": sol.u},
                     {"converged": sol.converged})
    sol.write_history(args.out / "admm_history.csv")
    _write_json(args.out / "summary.json", {
        "converged": sol.converged, "iterations": sol.iterations, "energy": sol.energy,
        "violations": sol.violations, "rho_final": sol.rho})
    return code


def cmd_verify(args) -> int:
    prob = _validated(args.problem)
    args.out.mkdir(parents=True, exist_ok=True)
    try:
        grid, cr, config = _run_continuation(args, prob)
    except NonConvergence as exc:
        return _fail(EXIT_NONCONV, str(exc))
    thresholds = dict(args.threshold)
    config.update({"thresholds": thresholds, "with_oracle": args.with_oracle,
                   "trials": args.trials, "debug_lambda_scale": args.debug_lambda_scale})
    _manifest(args.out, "verify", config)
    lf = extract_fields(cr, lambda_scale=args.debug_lambda_scale)
    report = complementarity_report(lf)
    failed = check_thresholds(report, thresholds)
    extra = {"failed": failed, "failed_lines": [describe_line(f) for f in failed],
             "eps_final": lf.eps, "flux_identity": lambda_flux_identity_check(cr)}
    if args.with_oracle:
        extra["step2"] = step2_vi_check(lf, trial_count=args.trials, seed=args.seed)
    report.write_json(args.out / "complementarity.json", extra)
    lf.write_csv(args.out / "fields.csv")
    if failed:
        lines = "; ".join(f"{f}: {describe_line(f)}" for f in failed)
        return _fail(EXIT_THRESHOLD, f"threshold failed for {lines}")
    return EXIT_OK


def cmd_study(args) -> int:
    try:
        with open(args.spec) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(EXIT_INPUT, f"cannot read study file {args.spec}: {exc}")
    if args.n:
        raw["n"] = args.n
    if args.eps_schedule:
        raw["eps_schedule"] = args.eps_schedule
    if args.r is not None:
        raw["r"] = args.r
    if args.tol is not None:
        raw["residual_tol"] = args.tol
    if args.workers is not None:
        raw["workers"] = args.workers
    raw.setdefault("seed", args.seed)
    try:
        spec = StudySpec.from_dict(raw)
    except StudyValidationError as exc:
        return _fail(EXIT_INPUT, str(exc))
    except ExpressionError as exc:
        return _fail(EXIT_INPUT, str(exc))
    except (KeyError, TypeError, ValueError) as exc:
        return _fail(EXIT_INPUT, f"invalid study file: {exc}")
    args.out.mkdir(parents=True, exist_ok=True)
    _manifest(args.out, "study", spec.to_dict())
    try:
        report = run_study(spec)
    except UnderResolvedSchedule as exc:
        return _fail(EXIT_INPUT, str(exc))
    report.write(args.out, "study")
    if not report.passed:
        return _fail(EXIT_THRESHOLD, f"study checks failed: {', '.join(report.failed())}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "oracle": cmd_oracle, "verify": cmd_verify, "study": cmd_study}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        return _fail(EXIT_INPUT, str(exc))


if __name__ == "__main__":
    sys.exit(main())
