"""Multiplier extraction and verification of the complementarity system.

From the finest converged entry of an eps-continuation the limit triple is
read off as ``u = u_eps``, ``lambda = khat_eps`` and ``chi = theta_eps``.
The reports check ``lambda >= 1``, the complementarity products, the
divergence-form equation with the contact term, and the identity
``-Lap u - f = (-Lap psi - f)^+`` on the obstacle contact set.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .grid import Grid, weighted_norm, write_fields_csv
from .oracle import AdmmOptions, OracleSolution, solve_vi_admm, vi_residual_check
from .penalty import DiscreteData, F_eps
from .problem import Problem
from .solver import ContinuationResult, PenalizedSolution

__all__ = [
    "NoConvergedEntries",
    "LagrangeFields",
    "ComplementarityReport",
    "extract_fields",
    "complementarity_report",
    "weak_equation_residual",
    "lambda_flux_identity_check",
    "step2_vi_check",
    "check_thresholds",
    "DEFAULT_THRESHOLDS",
]


class NoConvergedEntries(RuntimeError):
    pass


@dataclass
class LagrangeFields:
    """Limit candidates on the grid of the continuation run.

    ``lam_samples`` and ``flux`` live at the gradient sample points, the
    rest at nodes.  ``chi`` is the raw penalty limit in ``[-1, 0]`` and
    ``chi_bin = -1`` on the obstacle contact mask.
    """

    grid: Grid
    data: DiscreteData
    eps: float
    u: np.ndarray
    lam_samples: np.ndarray
    lam: np.ndarray
    chi: np.ndarray
    chi_bin: np.ndarray
    grad: np.ndarray
    flux: np.ndarray
    contact_grad_samples: np.ndarray
    contact_grad: np.ndarray
    contact_obstacle: np.ndarray
    tol_g: float
    tol_psi: float

    def write_csv(self, path) -> Path:
        s2n = self.grid.sample_to_node
        columns = {
            "u": self.u,
            "lambda": self.lam,
            "chi": self.chi,
            "chi_bin": self.chi_bin,
            "flux": np.column_stack([s2n @ self.flux[:, k] for k in range(self.grid.dimension)]),
            "contact_grad": self.contact_grad.astype(float),
            "contact_obstacle": self.contact_obstacle.astype(float),
        }
        meta = {"eps": self.eps, "tol_g": self.tol_g, "tol_psi": self.tol_psi}
        return write_fields_csv(path, self.grid, columns, meta)


def _entries(cr: ContinuationResult) -> list[PenalizedSolution]:
    conv = cr.converged_entries
    if len(conv) < 2:
        raise NoConvergedEntries(f"need two converged entries, found {len(conv)}")
    return conv


def extract_fields(cr: ContinuationResult, prob: Problem | None = None,
                   tol_g: float | None = None, tol_psi: float | None = None,
                   lambda_scale: float = 1.0) -> LagrangeFields:
    """Read the limit triple off the smallest converged eps.

    Gradient contact holds at samples with ``|grad u| >= g - tol_g``
    (default ``tol_g = sqrt(eps) * max g``); a node is in the gradient
    contact set when an adjacent sample is.  Obstacle contact holds where
    ``u <= psi - eps + tol_psi`` (default ``tol_psi = 1e-3 * eps``), which
    is the set where the penalty term is saturated.  ``lambda_scale``
    multiplies the multiplier and exists only to exercise failure paths.
    """
    entries = _entries(cr)
    fin = entries[-1]
    grid, data = cr.grid, cr.data
    eps = fin.eps
    gmax = float(np.max(data.g_nodes)) if data.has_gradient_bound else 0.0
    tol_g = math.sqrt(eps) * gmax if tol_g is None else float(tol_g)
    tol_psi = 1e-3 * eps if tol_psi is None else float(tol_psi)
    grad = grid.sample_gradient(fin.u)
    mag = np.sqrt(np.sum(grad**2, axis=1))
    lam_s = lambda_scale * fin.khat
    s2n = grid.sample_to_node
    with np.errstate(invalid="ignore"):
        cg_s = mag >= data.g_samples - tol_g
        co = fin.u <= data.psi - eps + tol_psi
    co &= ~grid.boundary
    adjacency = (abs(s2n) > 0).astype(float)
    cg = (adjacency @ cg_s.astype(float)) > 0
    return LagrangeFields(
        grid=grid, data=data, eps=eps, u=fin.u.copy(), lam_samples=lam_s, lam=s2n @ lam_s,
        chi=fin.theta.copy(), chi_bin=-co.astype(float), grad=grad, flux=lam_s[:, None] * grad,
        contact_grad_samples=cg_s, contact_grad=cg, contact_obstacle=co, tol_g=tol_g,
        tol_psi=tol_psi)


@dataclass
class ComplementarityReport:
    eq_residual_norm: float
    comp_grad: float
    comp_obs: float
    min_lambda: float
    max_grad_excess: float
    min_obstacle_gap: float
    sign_identity_residual: float
    weak_residual: float
    contact_overlap: int
    n_contact_obstacle: int
    n_contact_grad: int

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}

    def write_json(self, path, extra: dict | None = None) -> None:
        out = self.to_dict()
        if extra:
            out.update(extra)
        Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


def weak_equation_residual(lf: LagrangeFields, modes: int = 6) -> float:
    """Largest tested residual of the limit equation against sine modes.

    For each normalized mode ``phi`` reports
    ``|int lambda grad u . grad phi - int ((-Lap psi - f)^+ chi_bin' + f) phi|``
    with ``chi_bin' = 1`` on the contact mask.  Used as a diagnostic next
    to the strong residual, which is dominated by the penalty layer.
    """
    grid, data = lf.grid, lf.data
    lo = np.array([b[0] for b in grid.domain.bounds])
    hi = np.array([b[1] for b in grid.domain.bounds])
    t = (grid.coords - lo) / (hi - lo)
    w = grid.sample_weights
    nw = grid.node_weights
    inner = ~grid.boundary
    rhs = data.f + data.contact_coef * lf.contact_obstacle
    worst = 0.0
    ks = range(1, modes + 1)
    combos = [(k,) for k in ks] if grid.dimension == 1 else [(k, m) for k in ks for m in ks]
    for combo in combos:
        phi = np.ones(grid.size)
        for axis, k in enumerate(combo):
            phi *= np.sin(k * np.pi * t[:, axis])
        phi[~inner] = 0.0
        phi /= max(weighted_norm(phi, nw, 2.0), 1e-300)
        gphi = grid.sample_gradient(phi)
        lhs = float(np.sum(w * np.sum(lf.flux * gphi, axis=1)))
        val = abs(lhs - float(np.sum(nw * rhs * phi)))
        worst = max(worst, val)
    return worst


def complementarity_report(lf: LagrangeFields, prob: Problem | None = None) -> ComplementarityReport:
    """Evaluate every line of the limit system on the grid."""
    grid, data = lf.grid, lf.data
    w = grid.sample_weights
    nw = grid.node_weights
    inner = grid.interior
    mag = np.sqrt(np.sum(lf.grad**2, axis=1))
    if data.has_gradient_bound:
        gexc = mag - data.g_samples
        comp_grad = weighted_norm((lf.lam_samples - 1.0) * gexc, w, 1.0)
        max_gexc = float(np.max(gexc))
    else:
        comp_grad, max_gexc = 0.0, -math.inf
    if data.has_obstacle:
        gap = lf.u - data.psi
        comp_obs = weighted_norm(data.contact_coef * lf.chi * gap, nw, 1.0)
        min_gap = float(np.min(gap[inner]))
    else:
        comp_obs, min_gap = 0.0, math.inf
    div_term = -grid.sample_divergence(lf.flux)
    eq = div_term - data.contact_coef * lf.contact_obstacle - data.f
    eq_norm = weighted_norm(eq[inner], nw[inner], 2.0)
    co = lf.contact_obstacle
    if np.any(co):
        lap = grid.laplacian_op @ lf.u
        ident = (-lap - data.f) - data.contact_coef
        sign_res = float(np.max(np.abs(ident[co])))
    else:
        sign_res = 0.0
    return ComplementarityReport(
        eq_residual_norm=eq_norm, comp_grad=comp_grad, comp_obs=comp_obs,
        min_lambda=float(np.min(lf.lam_samples)), max_grad_excess=max_gexc,
        min_obstacle_gap=min_gap, sign_identity_residual=sign_res,
        weak_residual=weak_equation_residual(lf),
        contact_overlap=int(np.sum(co & lf.contact_grad)),
        n_contact_obstacle=int(np.sum(co)), n_contact_grad=int(np.sum(lf.contact_grad)))


DEFAULT_THRESHOLDS = {
    "min_lambda": 1.0 - 1e-12,
    "comp_grad": 1e-2,
    "comp_obs": 1e-3,
    "eq_residual_norm": 5e-2,
    "sign_identity_residual": 0.1,
}

_LINES = {
    "min_lambda": "lambda >= 1",
    "comp_grad": "(lambda - 1)(|grad u| - g) = 0",
    "comp_obs": "(-Lap psi - f)^+ chi (u - psi) = 0",
    "eq_residual_norm": "-div(lambda grad u) - (-Lap psi - f)^+ chi_{u=psi} = f",
    "sign_identity_residual": "-Lap u - f = (-Lap psi - f)^+ on {u = psi}",
}


def check_thresholds(report: ComplementarityReport, thresholds: dict | None = None) -> list[str]:
    """Names of failed checks; ``min_lambda`` is a lower bound, the rest upper bounds."""
    th = dict(DEFAULT_THRESHOLDS)
    th.update(thresholds or {})
    failed = []
    for name, bound in th.items():
        val = getattr(report, name)
        ok = val >= bound if name == "min_lambda" else val <= bound
        if not ok:
            failed.append(name)
    return failed


def describe_line(name: str) -> str:
    return _LINES.get(name, name)


def _rel(a: float, b: float) -> float:
    if a == 0.0 and b == 0.0:
        return 0.0
    return abs(a - b) / max(abs(b), abs(a), 1e-300)


def lambda_flux_identity_check(cr: ContinuationResult) -> dict:
    """Energy identities along the schedule.

    For every converged entry reports ``int khat |grad u_eps|^2``, its gap to
    ``int lambda |grad u|^2`` at the finest entry, the gap of the tested
    equation ``int khat |grad u_eps|^2 = int F_eps u_eps``, and the strong
    convergence quantities ``int khat |grad(u_eps - u)|^2`` and
    ``int |grad(u_eps - u)|^2``.
    """
    entries = _entries(cr)
    grid, data = cr.grid, cr.data
    w = grid.sample_weights
    nw = grid.node_weights
    fin = entries[-1]
    gfin = grid.sample_gradient(fin.u)
    target = float(np.sum(w * fin.khat * np.sum(gfin**2, axis=1)))
    rows = []
    for e in entries:
        g = grid.sample_gradient(e.u)
        flux_energy = float(np.sum(w * e.khat * np.sum(g**2, axis=1)))
        cross = float(np.sum(w * e.khat * np.sum(g * gfin, axis=1)))
        load = float(np.sum(nw * F_eps(e.u, data, e.params) * e.u))
        dg2 = np.sum((g - gfin) ** 2, axis=1)
        rows.append({
            "eps": e.eps,
            "flux_energy": flux_energy,
            "rel_gap": _rel(flux_energy, target),
            "cross_gap": _rel(cross, target),
            "tested_gap": _rel(flux_energy, load),
            "strong_weighted": float(np.sum(w * e.khat * dg2)),
            "strong": float(np.sum(w * dg2)),
        })
    strong = [r["strong"] for r in rows[:-1]]
    return {
        "target": target,
        "rows": rows,
        "final_tested_gap": rows[-1]["tested_gap"],
        "strong_decreasing": all(b < a for a, b in zip(strong, strong[1:])),
    }


def step2_vi_check(lf: LagrangeFields, prob: Problem | None = None,
                   oracle: OracleSolution | None = None, trial_count: int = 100,
                   seed: int = 0, tol_rel: float = 1e-2,
                   admm: AdmmOptions | None = None) -> dict:
    """Test ``u`` in the discrete VI and compare it with the ADMM minimizer.

    ``u`` comes from a penalty solve, so it is admissible only up to the
    penalty defect; trial fields are checked with feasibility tolerances
    ``tol_g`` (gradient) and ``eps + tol_psi`` (obstacle).
    """
    grid, data = lf.grid, lf.data
    if oracle is None:
        oracle = solve_vi_admm(data, grid, admm)
    vi = vi_residual_check(lf.u, data, grid, trial_count=trial_count, seed=seed,
                           tol_rel=tol_rel, grad_tol=max(lf.tol_g, 1e-12),
                           obstacle_tol=lf.eps + lf.tol_psi)
    return {"vi": vi.to_dict(), "max_diff_oracle": float(np.max(np.abs(lf.u - oracle.u))),
            "oracle_converged": oracle.converged}
