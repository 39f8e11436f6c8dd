"""Scripted studies: eps-convergence, continuous dependence on the data and
the embedding checks between the obstacle and gradient-constraint problems.

A study is described by a JSON ``StudySpec`` and produces a ``StudyReport``
(row table plus named threshold checks) written as CSV and JSON.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .grid import Grid, build_grid
from .lagrange import complementarity_report, extract_fields
from .oracle import AdmmOptions, constraint_violations, solve_vi_admm
from .penalty import discretize_problem
from .problem import Problem, parse_expression, validate_data
from .solver import ContinuationResult, SolveOptions, continuation_solve

__all__ = [
    "StudySpec",
    "StudyReport",
    "StudyValidationError",
    "run_study",
    "run_eps_convergence",
    "run_stability",
    "run_remark_embeddings",
    "probe_fields",
    "holder_seminorm",
]

KINDS = ("eps_convergence", "stability", "remark_gradient_embeds", "remark_obstacle_embeds")

DEFAULT_THRESHOLDS = {
    "eps_convergence": {"final_err": 5e-3, "decrease_slack": 1.5, "grad_decay_ratio": 0.7},
    "stability": {"floor_factor": 2.0},
    "remark_gradient_embeds": {"match": 1e-6, "oracle_match": 1e-2},
    "remark_obstacle_embeds": {"match": 1e-6, "oracle_match": 1e-2},
}


class StudyValidationError(ValueError):
    def __init__(self, message, index=None, hypothesis=None):
        super().__init__(message)
        self.index = index
        self.hypothesis = hypothesis


@dataclass
class StudySpec:
    """Inputs of one study.

    ``sequence`` (stability only) maps ``f``, ``g``, ``psi`` to expressions
    in the index symbol ``n`` plus ``indices``; missing entries fall back to
    the base problem.
    """

    kind: str
    problem: Problem
    n: list = field(default_factory=lambda: [201])
    eps_schedule: list = field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4])
    sequence: dict | None = None
    thresholds: dict = field(default_factory=dict)
    r: float = 4.0
    residual_tol: float = 1e-8
    allow_underresolved: bool = False
    margin: float = 0.5
    admm_rho: float = 1.0
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown study kind {self.kind!r}; expected one of {KINDS}")
        if isinstance(self.n, (int, np.integer)):
            self.n = [int(self.n)]
        self.n = [int(v) if not isinstance(v, (list, tuple)) else [int(x) for x in v]
                  for v in self.n]
        self.eps_schedule = [float(e) for e in self.eps_schedule]
        th = dict(DEFAULT_THRESHOLDS[self.kind])
        th.update(self.thresholds or {})
        self.thresholds = th
        if self.kind == "stability":
            if not self.sequence or not self.sequence.get("indices"):
                raise ValueError("stability study needs a sequence with indices")
            self.validate_sequence()

    @property
    def resolution(self):
        return self.n[0]

    def sequence_problem(self, index: int) -> Problem:
        seq = self.sequence or {}
        changes = {}
        for name in ("f", "g", "psi"):
            text = seq.get(name)
            if text is not None:
                changes[name] = parse_expression(text, ("n",)).bind(n=index)
        return self.problem.replace(**changes)

    def validate_sequence(self) -> None:
        for idx in self.sequence["indices"]:
            rep = validate_data(self.sequence_problem(idx))
            if not rep.passed:
                bad = rep.failures()[0]
                raise StudyValidationError(
                    f"sequence member n={idx} violates hypothesis {bad.name} "
                    f"(worst value {bad.worst:g} at {bad.witness})", idx, bad.name)

    @classmethod
    def from_dict(cls, data: dict) -> "StudySpec":
        data = dict(data)
        data["problem"] = Problem.from_dict(data["problem"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown study fields {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["problem"] = self.problem.to_dict()
        return out

    @classmethod
    def load(cls, path) -> "StudySpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class StudyReport:
    kind: str
    columns: list
    rows: list
    checks: dict
    spec: dict
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks.values())

    def failed(self) -> list[str]:
        return [k for k, c in self.checks.items() if not c["passed"]]

    def column(self, name) -> list:
        return [row[name] for row in self.rows]

    def write(self, out_dir, stem: str = "study") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_fmt(row.get(c)) for c in self.columns))
        csv_path.write_text("\n".join(lines) + "\n")
        json_path = out_dir / f"{stem}.json"
        summary = {"kind": self.kind, "passed": self.passed, "checks": self.checks,
                   "spec": self.spec, "extra": self.extra}
        json_path.write_text(json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _check(value, threshold, passed, note: str = "") -> dict:
    out = {"value": value, "threshold": threshold, "passed": bool(passed)}
    if note:
        out["note"] = note
    return out


def _opts(spec: StudySpec) -> SolveOptions:
    return SolveOptions(residual_tol=spec.residual_tol,
                        allow_underresolved=spec.allow_underresolved, skip_failures=True)


def _continuation(spec: StudySpec, problem: Problem, grid: Grid) -> ContinuationResult:
    return continuation_solve(problem, grid, spec.eps_schedule, spec.r, _opts(spec))


# -- eps convergence ---------------------------------------------------------


def run_eps_convergence(spec: StudySpec) -> StudyReport:
    """Solve along the schedule and compare every entry with the ADMM oracle."""
    if spec.kind != "eps_convergence":
        raise ValueError("spec.kind must be eps_convergence")
    grid = build_grid(spec.problem.domain, spec.resolution)
    data = discretize_problem(spec.problem, grid)
    oracle = solve_vi_admm(data, grid, AdmmOptions(rho=spec.admm_rho), raise_on_failure=False)
    cr = continuation_solve(data, grid, spec.eps_schedule, spec.r, _opts(spec))
    w = grid.sample_weights
    rows = []
    for entry, mon in zip(cr.entries, cr.monitors):
        gexc_pos, _ = constraint_violations(entry.u, data, grid)
        grad = grid.sample_gradient(entry.u)
        mag = np.sqrt(np.sum(grad**2, axis=1))
        if data.has_gradient_bound:
            comp = float(np.sum(w * np.abs((entry.khat - 1.0) * (mag - data.g_samples))))
        else:
            comp = 0.0
        with np.errstate(invalid="ignore"):
            gap = entry.u - data.psi
        row = {
            "eps": entry.eps,
            "converged": entry.converged,
            "err_oracle": float(np.max(np.abs(entry.u - oracle.u))),
            "grad_excess": gexc_pos,
            "min_gap": float(np.min(gap[grid.interior])),
            "comp_grad": comp,
        }
        row.update({k: mon[k] for k in ("L1_khat", "Lp_khat", "L2r_grad", "L2_flux", "measAeps",
                                        "newton_iters", "residual_norm")})
        rows.append(row)
    th = spec.thresholds
    errs = [r["err_oracle"] for r in rows]
    slack = th["decrease_slack"]
    checks = {
        "all_converged": _check(sum(r["converged"] for r in rows), len(rows),
                                all(r["converged"] for r in rows)),
        "err_weakly_decreasing": _check(
            errs, slack, all(b <= slack * a for a, b in zip(errs, errs[1:]))),
        "final_err": _check(errs[-1], th["final_err"], errs[-1] <= th["final_err"]),
        "penetration": _check(min(r["min_gap"] + r["eps"] for r in rows), 0.0,
                              all(r["min_gap"] >= -r["eps"] for r in rows)),
    }
    gex = [r["grad_excess"] for r in rows]
    ratios = [b / a for a, b in zip(gex, gex[1:]) if a > 1e-12]
    checks["grad_excess_decay"] = _check(max(ratios) if ratios else 0.0, th["grad_decay_ratio"],
                                         all(q <= th["grad_decay_ratio"] for q in ratios))
    extra = {"oracle_iterations": oracle.iterations, "oracle_converged": oracle.converged}
    cols = list(rows[0].keys())
    return StudyReport(spec.kind, cols, rows, checks, spec.to_dict(), extra)


# -- stability ---------------------------------------------------------------

_EXPONENTS = ((0, 0), (1, 0), (0, 1), (1, 1), (2, 0), (0, 2), (2, 1), (1, 2), (3, 0), (0, 3))


def probe_fields(grid: Grid, points: np.ndarray | None = None) -> np.ndarray:
    """Ten nonnegative smooth fields ``P_k(t) * bump(t)`` on the normalized box.

    ``bump = prod (1 - t_i^2)^2`` and ``P_k = (1 + t_0)^a (1 - t_0)^b`` with
    fixed exponents; rows are fields, columns points (samples by default).
    """
    pts = grid.sample_coords if points is None else np.asarray(points, dtype=float)
    lo = np.array([b[0] for b in grid.domain.bounds])
    hi = np.array([b[1] for b in grid.domain.bounds])
    t = 2.0 * (pts - lo) / (hi - lo) - 1.0
    bump = np.prod((1.0 - t**2) ** 2, axis=1)
    return np.array([(1.0 + t[:, 0]) ** a * (1.0 - t[:, 0]) ** b * bump for a, b in _EXPONENTS])


def holder_seminorm(values: np.ndarray, coords: np.ndarray, alpha: float,
                    chunk: int = 512) -> float:
    """``max |v(x) - v(y)| / |x - y|^alpha`` over all point pairs."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    coords = np.asarray(coords, dtype=float)
    best = 0.0
    for start in range(0, len(coords), chunk):
        sl = slice(start, start + chunk)
        dist = np.linalg.norm(coords[sl, None, :] - coords[None, :, :], axis=2)
        diff = np.linalg.norm(values[sl, None, :] - values[None, :, :], axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(dist > 0, diff / dist**alpha, 0.0)
        best = max(best, float(np.max(q)))
    return best


def _solve_member(args):
    bind, shape, spec_dict = args
    spec = StudySpec.from_dict(spec_dict)
    problem = spec.sequence_problem(bind) if bind is not None else spec.problem
    grid = build_grid(problem.domain, shape)
    cr = _continuation(spec, problem, grid)
    fin = cr.entries[-1]
    return fin.u, fin.khat, fin.converged, fin.residual_norm


def run_stability(spec: StudySpec) -> StudyReport:
    """Solve each sequence member and the limit problem on one grid.

    Columns: max-norm errors of ``u`` and of the sampled gradient, the 1D
    Hoelder seminorm of the gradient difference with exponent ``1 - d/(2r)``
    and the weak multiplier gaps ``|int (lambda_n - lambda) phi_k|``.
    """
    if spec.kind != "stability":
        raise ValueError("spec.kind must be stability")
    grid = build_grid(spec.problem.domain, spec.resolution)
    indices = [int(i) for i in spec.sequence["indices"]]
    spec_dict = spec.to_dict()
    jobs = [(None, spec.resolution, spec_dict)]
    jobs += [(idx, spec.resolution, spec_dict) for idx in indices]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            results = list(pool.map(_solve_member, jobs))
    else:
        results = [_solve_member(j) for j in jobs]
    u0, k0, conv0, _ = results[0]
    g0 = grid.sample_gradient(u0)
    phis = probe_fields(grid)
    w = grid.sample_weights
    alpha = 1.0 - grid.dimension / (2.0 * spec.r)
    rows = []
    for idx, (u, k, conv, rn) in zip(indices, results[1:]):
        dg = grid.sample_gradient(u) - g0
        row = {
            "n": idx,
            "converged": conv and conv0,
            "err_u": float(np.max(np.abs(u - u0))),
            "err_grad": float(np.max(np.linalg.norm(dg, axis=1))),
            "holder_grad": (holder_seminorm(dg, grid.sample_coords, alpha)
                            if grid.dimension == 1 else None),
            "residual_norm": rn,
        }
        gaps = np.abs(phis @ (w * (k - k0)))
        for j, gap in enumerate(gaps):
            row[f"lam_gap_{j}"] = float(gap)
        rows.append(row)
    th = spec.thresholds
    floor = th["floor_factor"] * spec.residual_tol
    checks = {"all_converged": _check(sum(r["converged"] for r in rows), len(rows),
                                      all(r["converged"] for r in rows))}
    for name in ("err_u", "err_grad"):
        vals = [r[name] for r in rows]
        checks[f"{name}_decreasing"] = _check(vals, None, all(b < a for a, b in zip(vals, vals[1:]))
                                              or all(v <= floor for v in vals))
        checks[f"{name}_final"] = _check(vals[-1], floor, vals[-1] <= floor)
    lam_ok = []
    for j in range(len(_EXPONENTS)):
        vals = [r[f"lam_gap_{j}"] for r in rows]
        lam_ok.append(all(b < a for a, b in zip(vals, vals[1:])) or all(v <= floor for v in vals))
    checks["lam_gaps_decreasing"] = _check(sum(lam_ok), len(lam_ok), all(lam_ok))
    errs = [r["err_u"] for r in rows]
    fit = errs[0] * indices[0]
    extra = {
        "rate_constant": fit,
        "rate_fit_holds": all(e <= fit / i * (1 + 1e-12) for e, i in zip(errs, indices)),
        "holder_exponent": alpha,
    }
    cols = list(rows[0].keys())
    return StudyReport(spec.kind, cols, rows, checks, spec.to_dict(), extra)


# -- embedding remarks --------------------------------------------------------


def run_remark_embeddings(spec: StudySpec) -> StudyReport:
    """Check that adding a non-binding constraint leaves the solution unchanged.

    ``remark_gradient_embeds``: the gradient-constraint solution also solves
    the problem with obstacle ``-max(g) * diam``.  ``remark_obstacle_embeds``:
    the obstacle solution also solves the problem with gradient bound
    ``max |grad u| + margin``.
    """
    if spec.kind not in ("remark_gradient_embeds", "remark_obstacle_embeds"):
        raise ValueError("spec.kind must be a remark study")
    base = spec.problem
    grid = build_grid(base.domain, spec.resolution)
    if spec.kind == "remark_gradient_embeds":
        if base.g is None:
            raise ValueError("the gradient embedding needs a gradient bound g")
        pure = base.replace(psi=None)
        gstar = float(np.max(discretize_problem(pure, grid).g_nodes))
        level = -gstar * base.domain.diameter
        embedded = base.replace(psi=repr(level), laplacian_psi="0")
        added = {"psi": level}
        cr_pure = _continuation(spec, pure, grid)
    else:
        if base.psi is None:
            raise ValueError("the obstacle embedding needs an obstacle psi")
        pure = base.replace(g=None)
        cr_pure = _continuation(spec, pure, grid)
        gstar = float(np.max(np.linalg.norm(grid.sample_gradient(cr_pure.entries[-1].u), axis=1)))
        bound = gstar + spec.margin
        embedded = base.replace(g=repr(bound))
        added = {"g": bound}
    cr_emb = _continuation(spec, embedded, grid)
    oracle = solve_vi_admm(pure, grid, AdmmOptions(rho=spec.admm_rho), raise_on_failure=False)
    u_pure = cr_pure.entries[-1].u
    rows = []
    for name, cr in (("pure", cr_pure), ("embedded", cr_emb)):
        fin = cr.entries[-1]
        data = cr.data
        with np.errstate(invalid="ignore"):
            gap = fin.u - data.psi
        n_obs = 0
        if len(cr.converged_entries) >= 2 and data.has_obstacle:
            n_obs = int(np.sum(extract_fields(cr).contact_obstacle))
        rows.append({
            "variant": name,
            "converged": fin.converged,
            "max_abs_u": float(np.max(np.abs(fin.u))),
            "diff_vs_pure": float(np.max(np.abs(fin.u - u_pure))),
            "diff_vs_oracle": float(np.max(np.abs(fin.u - oracle.u))),
            "min_gap": float(np.min(gap[grid.interior])) if data.has_obstacle else None,
            "max_grad": float(np.max(np.linalg.norm(grid.sample_gradient(fin.u), axis=1))),
            "n_contact_obstacle": n_obs,
        })
    th = spec.thresholds
    diff = rows[1]["diff_vs_pure"]
    checks = {
        "all_converged": _check(sum(r["converged"] for r in rows), 2,
                                all(r["converged"] for r in rows)),
        "match": _check(diff, th["match"], diff <= th["match"]),
        "oracle_match": _check(rows[1]["diff_vs_oracle"], th["oracle_match"],
                               rows[1]["diff_vs_oracle"] <= th["oracle_match"]),
    }
    if spec.kind == "remark_gradient_embeds":
        n_obs = rows[1]["n_contact_obstacle"]
        checks["obstacle_inactive"] = _check(n_obs, 0, n_obs == 0)
    else:
        gmax = rows[1]["max_grad"]
        checks["gradient_inactive"] = _check(gmax, added["g"], gmax < added["g"])
    extra = {"added_constraint": added, "oracle_converged": oracle.converged,
             "embedded_problem": embedded.to_dict()}
    if len(cr_emb.converged_entries) >= 2:
        extra["complementarity"] = complementarity_report(extract_fields(cr_emb)).to_dict()
    cols = list(rows[0].keys())
    return StudyReport(spec.kind, cols, rows, checks, spec.to_dict(), extra)


def run_study(spec: StudySpec) -> StudyReport:
    if spec.kind == "eps_convergence":
        return run_eps_convergence(spec)
    if spec.kind == "stability":
        return run_stability(spec)
    return run_remark_embeddings(spec)
