"""Damped Newton solver for the penalized problem and the eps-continuation loop."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import Grid, build_grid, interpolate, weighted_norm
from .penalty import (
    DiscreteData,
    PenaltyParams,
    assemble,
    discretize_problem,
    energy_penalized,
    k_eps,
    residual,
    theta_eps,
)
from .problem import Problem

__all__ = [
    "SolveOptions",
    "PenalizedSolution",
    "ContinuationResult",
    "NonConvergence",
    "LinearSolveFailure",
    "UnderResolvedSchedule",
    "solve_penalized",
    "continuation_solve",
    "default_schedule",
    "PenaltyVISolver",
]

log = logging.getLogger(__name__)

MONITOR_COLUMNS = ("eps", "L1_khat", "Lp_khat", "L2r_grad", "L2_flux", "measAeps",
                   "newton_iters", "residual_norm")


class NonConvergence(RuntimeError):
    def __init__(self, message, solution=None, result=None):
        super().__init__(message)
        self.solution = solution
        self.result = result


class LinearSolveFailure(RuntimeError):
    pass


class UnderResolvedSchedule(ValueError):
    pass


@dataclass
class SolveOptions:
    max_newton_iters: int = 100
    residual_tol: float = 1e-8
    shrink: float = 0.5
    min_step: float = 1e-10
    armijo: float = 1e-4
    picard_fallback: bool = True
    linear_solver: str = "direct"
    allow_underresolved: bool = False
    step_tol: float = 1e-13
    max_refinements: int = 8
    skip_failures: bool = False
    lp_exponent: float = 4.0

    def __post_init__(self):
        if self.residual_tol <= 0 or self.min_step <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink factor must lie in (0, 1)")
        if self.linear_solver not in ("direct", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class PenalizedSolution:
    eps: float
    r: float
    grid: Grid
    u: np.ndarray
    khat: np.ndarray
    theta: np.ndarray
    residual_norm: float
    newton_iters: int
    converged: bool
    picard_steps: int = 0
    tolerance: float = 0.0

    @property
    def khat_nodes(self) -> np.ndarray:
        return self.grid.sample_to_node @ self.khat

    @property
    def params(self) -> PenaltyParams:
        return PenaltyParams(self.eps, self.r)


def residual_norm(grid: Grid, res: np.ndarray) -> float:
    inner = grid.interior
    return weighted_norm(res[inner], grid.node_weights[inner], 2.0)


def _solve_linear(jac: sp.csr_matrix, rhs: np.ndarray, grid: Grid, opts: SolveOptions) -> np.ndarray:
    if opts.linear_solver == "cg":
        diag = jac.diagonal()
        precond = spla.LinearOperator(jac.shape, matvec=lambda x: x / diag)
        tol = 1e-2 * opts.residual_tol / max(np.linalg.norm(rhs), 1e-300)
        sol, info = spla.cg(jac, rhs, rtol=min(tol, 1e-6), atol=0.0, M=precond,
                            maxiter=20 * jac.shape[0])
        if info != 0:
            raise LinearSolveFailure(f"CG did not converge (info={info})")
        return sol
    if grid.dimension == 1:
        # symmetric tridiagonal: banded Cholesky
        n = jac.shape[0]
        ab = np.zeros((2, n))
        ab[0, 1:] = jac.diagonal(1)
        ab[1, :] = jac.diagonal(0)
        try:
            return sla.solveh_banded(ab, rhs, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise LinearSolveFailure(f"banded Cholesky failed: {exc}") from None
    try:
        sol = spla.spsolve(jac.tocsc(), rhs)
    except RuntimeError as exc:
        raise LinearSolveFailure(str(exc)) from None
    if not np.all(np.isfinite(sol)):
        raise LinearSolveFailure("singular Jacobian")
    return sol


def _picard_step(u, data: DiscreteData, p: PenaltyParams, grid: Grid, opts: SolveOptions):
    # freeze khat and theta, solve the linear flux problem
    grad = grid.sample_gradient(u)
    with np.errstate(invalid="ignore"):
        k = k_eps(np.sum(grad**2, axis=1) - data.g_samples**2, p)
        th = theta_eps(u - data.psi, p)
    w = grid.sample_weights * k / grid.cell_volume
    mat = sum(op.T @ sp.diags(w) @ op for op in grid.sample_gradient_ops)
    inner = (~grid.boundary).astype(float)
    mat = (sp.diags(inner) @ mat @ sp.diags(inner) + sp.diags(grid.boundary.astype(float))).tocsr()
    rhs = (data.f - data.contact_coef * th) * inner
    return _solve_linear(mat, rhs, grid, opts)


def solve_penalized(prob: Problem | DiscreteData, grid: Grid, p: PenaltyParams,
                    init: np.ndarray | None = None,
                    opts: SolveOptions | None = None) -> PenalizedSolution:
    """Solve the penalized problem for one ``eps`` by damped Newton.

    Steps are accepted by Armijo backtracking on the convex energy, or on
    the discrete L2 residual norm provided the energy does not rise beyond
    round-off.  When backtracking stalls a Picard step (frozen
    coefficients) is taken.
    The result carries ``converged=False`` when iterations run out.
    """
    opts = opts or SolveOptions()
    data = prob if isinstance(prob, DiscreteData) else discretize_problem(prob, grid)
    p.check_dimension(grid.dimension)
    u = np.zeros(grid.size) if init is None else np.array(init, dtype=float)
    u[grid.boundary] = 0.0
    cv = grid.cell_volume
    picard = 0
    best_u, best_rn = u.copy(), np.inf
    it = 0
    tol = opts.residual_tol
    system = assemble(u, data, p)
    rn = residual_norm(grid, system.residual)
    while True:
        if rn < best_rn:
            best_u, best_rn = u.copy(), rn
        if rn <= tol or it >= opts.max_newton_iters:
            break
        it += 1
        delta = _solve_linear(system.jacobian, -system.residual, grid, opts)
        delta[grid.boundary] = 0.0
        scale = max(1.0, float(np.max(np.abs(u))))
        if np.max(np.abs(delta)) <= opts.step_tol * scale:
            # Newton step at round-off level: accept the round-off floor
            floor = (np.finfo(float).eps * _row_norm(system.jacobian) * scale
                     * np.sqrt(grid.domain.volume))
            tol = max(opts.residual_tol, floor)
            if rn <= tol:
                break
        e0 = energy_penalized(u, data, p)
        slope = cv * float(system.residual[grid.interior] @ delta[grid.interior])
        t, accepted = 1.0, False
        # energy may not rise beyond round-off, otherwise the two tests can cycle
        noise = 1e-12 * (abs(e0) + 1.0)
        while t >= opts.min_step:
            trial = u + t * delta
            e_t = energy_penalized(trial, data, p)
            if np.isfinite(e_t) and slope < 0 and e_t <= e0 + opts.armijo * t * slope:
                accepted = True
                break
            if np.isfinite(e_t) and e_t <= e0 + noise:
                rn_t = residual_norm(grid, residual(trial, data, p))
                if np.isfinite(rn_t) and rn_t <= (1.0 - opts.armijo * t) * rn:
                    accepted = True
                    break
            t *= opts.shrink
        if accepted:
            u = trial
        elif opts.picard_fallback:
            picard += 1
            u = _picard_step(u, data, p, grid, opts)
        else:
            break
        system = assemble(u, data, p)
        rn = residual_norm(grid, system.residual)
        log.debug("eps=%.3g it=%d step=%.3g residual=%.3e", p.eps, it, t, rn)
    converged = bool(rn <= tol)
    if not converged:
        u = best_u
        system = assemble(u, data, p)
        rn = residual_norm(grid, system.residual)
    return PenalizedSolution(p.eps, p.r, grid, u, system.khat, system.theta, rn, it,
                             converged, picard, tol)


def _row_norm(mat: sp.csr_matrix) -> float:
    return float(np.max(abs(mat) @ np.ones(mat.shape[1])))


def monitors(sol: PenalizedSolution, data: DiscreteData, lp_exponent: float = 4.0) -> dict:
    """Norms bounded uniformly in eps by the a priori estimates."""
    grid = sol.grid
    grad = grid.sample_gradient(sol.u)
    w = grid.sample_weights
    mag2 = np.sum(grad**2, axis=1)
    with np.errstate(invalid="ignore"):
        excess = mag2 - data.g_samples**2
    in_a = excess >= np.sqrt(sol.eps)
    touches = grid.sample_touches_boundary
    bexcess = float(np.max(excess[touches])) if data.has_gradient_bound else float("-inf")
    return {
        "eps": sol.eps,
        "L1_khat": weighted_norm(sol.khat, w, 1.0),
        "Lp_khat": weighted_norm(sol.khat, w, lp_exponent),
        "L2r_grad": weighted_norm(np.sqrt(mag2), w, 2.0 * sol.r),
        "L2_flux": weighted_norm(sol.khat * np.sqrt(mag2), w, 2.0),
        "measAeps": float(np.sum(w[in_a])),
        "newton_iters": sol.newton_iters,
        "residual_norm": sol.residual_norm,
        "boundary_excess": bexcess,
        "boundary_constant": bexcess / sol.eps,
    }


@dataclass
class ContinuationResult:
    grid: Grid
    data: DiscreteData
    r: float
    entries: list[PenalizedSolution] = field(default_factory=list)
    monitors: list[dict] = field(default_factory=list)

    @property
    def schedule(self) -> list[float]:
        return [e.eps for e in self.entries]

    @property
    def converged_entries(self) -> list[PenalizedSolution]:
        return [e for e in self.entries if e.converged]

    @property
    def final(self) -> PenalizedSolution:
        conv = self.converged_entries
        if not conv:
            raise NonConvergence("no converged entries", result=self)
        return conv[-1]

    def monitor_table(self) -> list[list]:
        return [[m[c] for c in MONITOR_COLUMNS] for m in self.monitors]

    def write_monitors(self, path) -> None:
        lines = [",".join(MONITOR_COLUMNS)]
        for row in self.monitor_table():
            lines.append(",".join(repr(float(v)) if not isinstance(v, int) else str(v)
                                  for v in row))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def default_schedule(eps_min: float = 1e-4, start: float = 1e-1) -> list[float]:
    """Geometric schedule ``start, start/10, ...`` down to ``eps_min``."""
    out, eps = [], start
    while eps >= eps_min * (1 - 1e-12):
        out.append(float(eps))
        eps /= 10.0
    return out


def check_schedule(schedule, grid: Grid, allow_underresolved: bool = False) -> list[float]:
    sched = [float(e) for e in schedule]
    if not sched:
        raise ValueError("empty eps schedule")
    if any(not 0.0 < e < 1.0 for e in sched):
        raise ValueError("every eps must lie in (0, 1)")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ValueError("eps schedule must be strictly decreasing")
    h2 = grid.h**2
    if sched[-1] < h2:
        msg = (f"eps={sched[-1]:g} is below h^2={h2:.3g}; the grid cannot resolve the "
               "penalty layer")
        warnings.warn(msg, stacklevel=3)
        if not allow_underresolved:
            raise UnderResolvedSchedule(msg)
    return sched


def _solve_with_refinement(data, grid, eps_prev, eps, r, init, opts, depth=0):
    sol = solve_penalized(data, grid, PenaltyParams(eps, r), init, opts)
    if sol.converged or eps_prev is None or depth >= opts.max_refinements:
        return sol
    # insert an intermediate eps and retry from there
    mid = float(np.sqrt(eps_prev * eps))
    log.info("refining continuation between %g and %g", eps_prev, eps)
    inter = _solve_with_refinement(data, grid, eps_prev, mid, r, init, opts, depth + 1)
    if not inter.converged:
        return sol
    return _solve_with_refinement(data, grid, mid, eps, r, inter.u, opts, depth + 1)


def continuation_solve(prob: Problem | DiscreteData, grid: Grid, schedule, r: float = 4.0,
                       opts: SolveOptions | None = None,
                       init: np.ndarray | None = None) -> ContinuationResult:
    """Solve along a decreasing eps schedule, warm-starting each solve."""
    opts = opts or SolveOptions()
    sched = check_schedule(schedule, grid, opts.allow_underresolved)
    data = prob if isinstance(prob, DiscreteData) else discretize_problem(prob, grid)
    result = ContinuationResult(grid, data, r)
    u = init
    eps_prev = None
    for eps in sched:
        sol = _solve_with_refinement(data, grid, eps_prev, eps, r, u, opts)
        result.entries.append(sol)
        result.monitors.append(monitors(sol, data, opts.lp_exponent))
        if not sol.converged:
            if not opts.skip_failures:
                raise NonConvergence(
                    f"Newton did not converge at eps={eps:g} (residual {sol.residual_norm:.3e})",
                    solution=sol, result=result)
            continue
        u, eps_prev = sol.u, eps
    return result


class PenaltyVISolver(BaseEstimator):
    """Solve the gradient-constraint / obstacle VI by penalization.

    ``fit(problem)`` runs the eps-continuation on an ``n``-point grid and
    stores the finest solution; ``predict(points)`` interpolates it.

    Parameters
    ----------
    n : int or tuple of int
        Grid points per axis.
    eps_schedule : sequence of float
        Strictly decreasing penalty parameters in (0, 1).
    r : float
        Exponent of the gradient penalty; must exceed ``max(2, d/2)``.
    """

    def __init__(self, n=201, eps_schedule=(1e-1, 1e-2, 1e-3, 1e-4), r=4.0,
                 residual_tol=1e-8, max_newton_iters=100, linear_solver="direct",
                 allow_underresolved=False, lp_exponent=4.0):
        self.n = n
        self.eps_schedule = eps_schedule
        self.r = r
        self.residual_tol = residual_tol
        self.max_newton_iters = max_newton_iters
        self.linear_solver = linear_solver
        self.allow_underresolved = allow_underresolved
        self.lp_exponent = lp_exponent

    def _options(self) -> SolveOptions:
        return SolveOptions(max_newton_iters=self.max_newton_iters,
                            residual_tol=self.residual_tol,
                            linear_solver=self.linear_solver,
                            allow_underresolved=self.allow_underresolved,
                            lp_exponent=self.lp_exponent)

    def fit(self, problem: Problem, y=None, init=None):
        self.problem_ = problem
        self.grid_ = build_grid(problem.domain, self.n)
        self.result_ = continuation_solve(problem, self.grid_, self.eps_schedule, self.r,
                                          self._options(), init=init)
        final = self.result_.final
        self.u_ = final.u
        self.khat_ = final.khat
        self.theta_ = final.theta
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "u_")
        X = check_array(X, ensure_2d=False)
        return interpolate(self.grid_, self.u_, X)
