"""ADMM oracle for the discrete variational inequality.

The discrete problem is the minimization of

    J(v) = 1/2 sum_q w_q |G_q v|^2 - cv * sum_i f_i v_i

over ``{v = 0 on the boundary, |G_q v| <= g_q, v_i >= psi_i}``, using the
same sampled gradients as the penalty scheme.  The splitting introduces
``z = G v`` (projected onto balls of radius ``g``) and ``y = v`` (projected
onto ``y >= psi``), so every sub-step is either one linear solve with a
fixed matrix or a pointwise projection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .grid import Grid, build_grid, interpolate
from .penalty import DiscreteData, discretize_problem
from .problem import Problem

__all__ = [
    "AdmmOptions",
    "OracleSolution",
    "MaxItersExceeded",
    "IllPosedData",
    "InfeasibleInput",
    "VICheckReport",
    "energy",
    "project_ball",
    "project_obstacle",
    "constraint_violations",
    "solve_vi_admm",
    "vi_residual_check",
    "AdmmVISolver",
]

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iter", "primal_res", "dual_res", "energy")


class MaxItersExceeded(RuntimeError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class IllPosedData(ValueError):
    pass


class InfeasibleInput(ValueError):
    pass


@dataclass
class AdmmOptions:
    rho: float = 1.0
    max_iters: int = 50000
    primal_tol: float = 1e-9  # relative, see solve_vi_admm
    dual_tol: float = 1e-9
    relaxation: float = 1.6
    balance_ratio: float = 10.0
    balance_factor: float = 2.0
    balance_every: int = 10
    rho_max: float = 1e6
    grad_feas_tol: float = 1e-6  # relative to max g
    obstacle_feas_tol: float = 1e-8

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.primal_tol <= 0 or self.dual_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.grad_feas_tol <= 0 or self.obstacle_feas_tol <= 0:
            raise ValueError("feasibility tolerances must be positive")
        if not 1.0 <= self.relaxation < 2.0:
            raise ValueError("relaxation must lie in [1, 2)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class OracleSolution:
    grid: Grid
    u: np.ndarray
    energy: float
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    grad_violation: float = 0.0
    obstacle_violation: float = 0.0
    grad_tol: float = 0.0
    obstacle_tol: float = 0.0
    iterations: int = 0
    converged: bool = False
    rho: float = 1.0

    @property
    def violations(self) -> dict:
        return {"grad_excess": self.grad_violation, "obstacle_excess": self.obstacle_violation}

    def write_history(self, path) -> None:
        lines = [",".join(HISTORY_COLUMNS)]
        for it, rp, rd, en in self.history:
            lines.append(f"{it},{rp!r},{rd!r},{en!r}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


def _data(prob, grid) -> DiscreteData:
    return prob if isinstance(prob, DiscreteData) else discretize_problem(prob, grid)


def energy(v, prob: Problem | DiscreteData, grid: Grid) -> float:
    """Discrete Dirichlet energy minus the load, on the sampled-gradient quadrature."""
    data = _data(prob, grid)
    v = np.asarray(v, dtype=float)
    if np.any(v[grid.boundary] != 0.0):
        raise ValueError("v must vanish on the boundary")
    grad = grid.sample_gradient(v)
    dirichlet = 0.5 * math.fsum(grid.sample_weights * np.sum(grad**2, axis=1))
    inner = grid.interior
    load = grid.cell_volume * math.fsum(data.f[inner] * v[inner])
    return dirichlet - load


def project_ball(z, radius):
    """Project each row of ``z`` onto the ball of the matching radius."""
    z = np.asarray(z, dtype=float)
    radius = np.asarray(radius, dtype=float)
    if np.any(radius < 0):
        raise ValueError("radius must be nonnegative")
    if z.ndim == 1 and radius.ndim == 0:
        nrm = np.linalg.norm(z)
        return z.copy() if nrm <= radius else z * (radius / nrm)
    nrm = np.linalg.norm(z, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(nrm > radius, radius / nrm, 1.0)
    return z * scale[..., None]


def project_obstacle(v, psi):
    return np.maximum(np.asarray(v, dtype=float), psi)


def constraint_violations(u, data: DiscreteData, grid: Grid) -> tuple[float, float]:
    """Largest ``(|grad u| - g)^+`` over samples and ``(psi - u)^+`` over nodes."""
    grad = grid.sample_gradient(u)
    with np.errstate(invalid="ignore"):
        gexc = np.sqrt(np.sum(grad**2, axis=1)) - data.g_samples
    gviol = max(0.0, float(np.max(gexc))) if data.has_gradient_bound else 0.0
    with np.errstate(invalid="ignore"):
        oexc = data.psi - u
    oviol = max(0.0, float(np.max(oexc))) if data.has_obstacle else 0.0
    return gviol, oviol


class _Factor:
    """Factorization of ``(1 + rho) A + rho beta I`` on interior nodes."""

    def __init__(self, a_int: sp.csr_matrix, beta: float, rho: float, banded: bool):
        mat = ((1.0 + rho) * a_int + rho * beta * sp.identity(a_int.shape[0])).tocsr()
        self.banded = banded
        if banded:
            n = mat.shape[0]
            ab = np.zeros((2, n))
            ab[0, 1:] = mat.diagonal(1)
            ab[1, :] = mat.diagonal(0)
            self.chol = sla.cholesky_banded(ab)
        else:
            self.lu = spla.splu(mat.tocsc())

    def solve(self, rhs):
        if self.banded:
            return sla.cho_solve_banded((self.chol, False), rhs)
        return self.lu.solve(rhs)


def _check_data(data: DiscreteData, grid: Grid) -> None:
    if data.has_gradient_bound and np.any(data.g_samples <= 0):
        raise IllPosedData("gradient bound g must be positive")
    if data.has_obstacle and np.any(data.psi[grid.boundary] > 0):
        raise IllPosedData("obstacle is positive on the boundary; the constraint set is empty")


def solve_vi_admm(prob: Problem | DiscreteData, grid: Grid, opts: AdmmOptions | None = None,
                  init: np.ndarray | None = None, raise_on_failure: bool = True,
                  history_every: int = 1) -> OracleSolution:
    """Minimize the discrete energy over the constraint set by ADMM.

    Uses over-relaxation and residual balancing of ``rho`` (with rescaled
    duals and a fresh factorization after each change).  Stops when both
    weighted residuals are below tolerance and the iterate itself meets
    the feasibility tolerances.  Residual tolerances are relative to
    ``max(1, norm)`` of the split variables (primal) and of the scaled
    duals (dual).  Raises ``MaxItersExceeded`` carrying the
    last iterate otherwise.
    """
    opts = opts or AdmmOptions()
    data = _data(prob, grid)
    _check_data(data, grid)
    inner = grid.interior
    cv = grid.cell_volume
    ops = [op[:, inner].tocsr() for op in grid.sample_gradient_ops]
    w = grid.sample_weights
    a_int = sum(op.T @ sp.diags(w) @ op for op in ops).tocsr()
    banded = grid.dimension == 1
    g = data.g_samples
    psi = data.psi[inner]
    load = cv * data.f[inner]
    gmax = float(np.max(g)) if data.has_gradient_bound else 1.0
    gtol = opts.grad_feas_tol * gmax
    otol = opts.obstacle_feas_tol
    # the obstacle split is weighted like a gradient sample so both blocks share rho
    beta = cv / grid.h

    # component-major layout: gradients are (d, nq) arrays
    gstack = sp.vstack(ops).tocsr()
    gstack_t = gstack.T.tocsr()
    nq = grid.n_samples

    def grad_of(x):
        return (gstack @ x).reshape(-1, nq)

    def div_w(zz):
        return gstack_t @ (zz * w).ravel()

    def sqn(zz, v):
        return float(w @ np.einsum("ij,ij->j", zz, zz)) + beta * float(v @ v)

    def ball(zz):
        if not data.has_gradient_bound:
            return zz
        nrm = np.sqrt(np.einsum("ij,ij->j", zz, zz))
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(nrm > g, g / nrm, 1.0)
        return zz * fac

    rho = opts.rho
    factor = _Factor(a_int, beta, rho, banded)
    x = np.zeros(inner.size) if init is None else np.array(init, dtype=float)[inner]
    gx = grad_of(x)
    z = ball(gx)
    y = project_obstacle(x, psi)
    a = np.zeros_like(z)
    b = np.zeros_like(y)
    alpha = opts.relaxation
    history = []
    converged = False
    it = 0
    rp = rd = math.inf
    for it in range(1, opts.max_iters + 1):
        x = factor.solve(load + rho * div_w(z - a) + rho * beta * (y - b))
        gx = grad_of(x)
        gr = alpha * gx + (1.0 - alpha) * z
        xr = alpha * x + (1.0 - alpha) * y
        z_old, y_old = z, y
        z = ball(gr + a)
        y = project_obstacle(xr + b, psi)
        a = a + gr - z
        b = b + xr - y
        rp = math.sqrt(sqn(gx - z, x - y))
        rd = rho * math.sqrt(sqn(z - z_old, y - y_old))
        if it % history_every == 0 or it == 1:
            history.append((it, rp, rd, 0.5 * sqn(gx, 0.0 * x) - float(load @ x)))
        scale_p = max(1.0, math.sqrt(sqn(gx, x)), math.sqrt(sqn(z, y)))
        scale_d = max(1.0, rho * math.sqrt(sqn(a, b)))
        if rp <= opts.primal_tol * scale_p and rd <= opts.dual_tol * scale_d:
            u = np.zeros(grid.size)
            u[inner] = x
            gv, ov = constraint_violations(u, data, grid)
            if gv <= gtol and ov <= otol:
                converged = True
                break
        if it % opts.balance_every == 0:
            scale = 1.0
            if rp > opts.balance_ratio * rd and rho * opts.balance_factor <= opts.rho_max:
                scale = opts.balance_factor
            elif rd > opts.balance_ratio * rp:
                scale = 1.0 / opts.balance_factor
            if scale != 1.0:
                rho *= scale
                a /= scale
                b /= scale
                factor = _Factor(a_int, beta, rho, banded)
    u = np.zeros(grid.size)
    u[inner] = x
    gv, ov = constraint_violations(u, data, grid)
    en = energy(u, data, grid)
    if history and history[-1][0] != it:
        history.append((it, rp, rd, 0.5 * sqn(gx, 0.0 * x) - float(load @ x)))
    sol = OracleSolution(grid, u, en, history, gv, ov, gtol, otol, it, converged, rho)
    log.info("admm: %d iterations, primal %.2e dual %.2e, converged=%s", it, rp, rd, converged)
    if not converged and raise_on_failure:
        raise MaxItersExceeded(
            f"ADMM stopped after {it} iterations (primal {rp:.3e}, dual {rd:.3e})", solution=sol)
    return sol


@dataclass
class VICheckReport:
    worst_margin: float
    scale: float
    tol: float
    margins: np.ndarray
    passed: bool

    def to_dict(self) -> dict:
        return {"worst_margin": self.worst_margin, "scale": self.scale, "tol": self.tol,
                "trials": int(self.margins.size), "passed": self.passed}


def _random_field(grid: Grid, rng: np.random.Generator, modes: int = 8) -> np.ndarray:
    # smooth random field vanishing on the boundary (sine series)
    coords = grid.coords
    lo = np.array([b[0] for b in grid.domain.bounds])
    hi = np.array([b[1] for b in grid.domain.bounds])
    t = (coords - lo) / (hi - lo)
    ks = np.arange(1, modes + 1)
    if grid.dimension == 1:
        coef = rng.standard_normal(modes) / ks**2
        total = np.sin(np.pi * np.outer(t[:, 0], ks)) @ coef
    else:
        coef = rng.standard_normal((modes, modes)) / np.add.outer(ks, ks) ** 2
        sx = np.sin(np.pi * np.outer(t[:, 0], ks))
        sy = np.sin(np.pi * np.outer(t[:, 1], ks))
        total = np.einsum("ni,ij,nj->n", sx, coef, sy)
    total[grid.boundary] = 0.0
    return total


def _feasible(v, data, grid, gtol, otol) -> bool:
    gv, ov = constraint_violations(v, data, grid)
    return gv <= gtol and ov <= otol


def _feasible_trial(u, data, grid, rng, gtol, otol) -> np.ndarray:
    phi = _random_field(grid, rng)
    if data.has_gradient_bound:
        gmag = np.sqrt(np.sum(grid.sample_gradient(phi) ** 2, axis=1))
        ratio = float(np.max(gmag / data.g_samples))
        amp = rng.uniform(0.2, 1.0)
        if ratio > 0:
            phi = phi * (amp / ratio)
    q = phi.copy()
    if data.has_obstacle:
        inner = ~grid.boundary
        q[inner] = np.maximum(q[inner], data.psi[inner])
    if _feasible(q, data, grid, gtol, otol):
        return q
    # pull q toward u until the segment endpoint is feasible
    lo, hi = 0.0, 1.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if _feasible(u + mid * (q - u), data, grid, gtol, otol):
            lo = mid
        else:
            hi = mid
    return u + lo * (q - u)


def vi_residual_check(u, prob: Problem | DiscreteData, grid: Grid, trial_count: int = 100,
                      seed: int = 0, tol_rel: float = 1e-6, grad_tol: float | None = None,
                      obstacle_tol: float = 1e-8, extra_trials=()) -> VICheckReport:
    """Test the discrete variational inequality against random feasible fields.

    Each trial is ``v = u + s (q - u)`` with ``q`` a random admissible
    field and ``s`` in ``(0, 1]``, so ``v`` is admissible whenever ``u`` is.
    The margin ``<grad u, grad(v - u)> - (f, v - u)`` must be at least
    ``-tol_rel * scale``.  Fields in ``extra_trials`` are tested as given.
    """
    data = _data(prob, grid)
    u = np.asarray(u, dtype=float)
    gmax = float(np.max(data.g_samples)) if data.has_gradient_bound else 1.0
    gtol = 1e-6 * gmax if grad_tol is None else grad_tol
    gv, ov = constraint_violations(u, data, grid)
    if gv > gtol or ov > obstacle_tol:
        raise InfeasibleInput(f"u violates the constraints (grad {gv:.3e}, obstacle {ov:.3e})")
    rng = np.random.default_rng(seed)
    w = grid.sample_weights
    inner = grid.interior
    gu = grid.sample_gradient(u)
    cv = grid.cell_volume

    def margin(v):
        dv = v - u
        gd = grid.sample_gradient(dv)
        return float(np.sum(w * np.sum(gu * gd, axis=1)) - cv * np.sum(data.f[inner] * dv[inner]))

    scale = float(np.sum(w * np.sum(gu**2, axis=1)) + cv * abs(np.sum(data.f[inner] * u[inner])))
    scale = max(scale, 1e-12)
    margins = []
    for _ in range(trial_count):
        q = _feasible_trial(u, data, grid, rng, gtol, obstacle_tol)
        s = rng.uniform(1e-3, 1.0)
        margins.append(margin(u + s * (q - u)))
    for v in extra_trials:
        margins.append(margin(np.asarray(v, dtype=float)))
    margins = np.array(margins)
    worst = float(np.min(margins)) if margins.size else 0.0
    tol = tol_rel * scale
    return VICheckReport(worst, scale, tol, margins, worst >= -tol)


class AdmmVISolver(BaseEstimator):
    """Reference solver for the constrained problem by operator splitting.

    ``fit(problem)`` solves on an ``n``-point grid; ``predict(points)``
    interpolates the discrete minimizer.
    """

    def __init__(self, n=201, rho=1.0, max_iters=50000, tol=1e-10, relaxation=1.6):
        self.n = n
        self.rho = rho
        self.max_iters = max_iters
        self.tol = tol
        self.relaxation = relaxation

    def fit(self, problem: Problem, y=None):
        self.grid_ = build_grid(problem.domain, self.n)
        opts = AdmmOptions(rho=self.rho, max_iters=self.max_iters, primal_tol=self.tol,
                           dual_tol=self.tol, relaxation=self.relaxation)
        self.solution_ = solve_vi_admm(problem, self.grid_, opts)
        self.u_ = self.solution_.u
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "u_")
        X = check_array(X, ensure_2d=False)
        return interpolate(self.grid_, self.u_, X)
