"""Penalty functions and the discrete penalized operator.

For fixed ``eps`` the penalized problem

    -div(k_eps(|grad u|^2 - g^2) grad u) + (-Lap psi - f)^+ theta_eps(u - psi) = f

is the Euler-Lagrange equation of a convex energy.  The discrete residual is
assembled as the gradient of the discrete energy divided by the cell volume,
so the Jacobian is symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .grid import Grid
from .problem import Problem, evaluate

__all__ = [
    "PenaltyParams",
    "DiscreteData",
    "AssembledSystem",
    "discretize_problem",
    "k_eps",
    "dk_eps",
    "theta_eps",
    "dtheta_eps",
    "phi_eps",
    "assemble",
    "residual",
    "energy_penalized",
    "principal_operator",
    "F_eps",
]


@dataclass(frozen=True)
class PenaltyParams:
    eps: float
    r: float = 4.0

    def __post_init__(self):
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.r <= 2.0:
            raise ValueError(f"r must exceed 2, got {self.r}")

    def check_dimension(self, d: int) -> None:
        if self.r <= max(2.0, d / 2.0):
            raise ValueError(f"r={self.r} must exceed max(2, d/2) for d={d}")


def k_eps(s, p: PenaltyParams):
    """Coefficient ``1`` for ``s <= 0`` and ``1 + (s/eps)^r`` beyond."""
    s = np.asarray(s, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(s > 0.0, 1.0 + (np.maximum(s, 0.0) / p.eps) ** p.r, 1.0)
    return out[()] if out.ndim == 0 else out


def dk_eps(s, p: PenaltyParams):
    s = np.asarray(s, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(s > 0.0, (p.r / p.eps) * (np.maximum(s, 0.0) / p.eps) ** (p.r - 1.0), 0.0)
    return out[()] if out.ndim == 0 else out


def theta_eps(s, p: PenaltyParams):
    """Bounded obstacle penalty: ``-1`` below ``-eps``, linear up to 0, then 0.

    The middle branch is ``-eps < s < 0``; it is the only reading that makes
    the function continuous.
    """
    s = np.asarray(s, dtype=float)
    out = np.clip(s / p.eps, -1.0, 0.0)
    return out[()] if out.ndim == 0 else out


def dtheta_eps(s, p: PenaltyParams):
    # a.e. derivative; 0 at the two kinks
    s = np.asarray(s, dtype=float)
    out = np.where((s > -p.eps) & (s < 0.0), 1.0 / p.eps, 0.0)
    return out[()] if out.ndim == 0 else out


def phi_eps(s, a, p: PenaltyParams):
    """``k_eps(s^2 - a) s``; nondecreasing in ``s`` for every ``a``."""
    s = np.asarray(s, dtype=float)
    return k_eps(s * s - a, p) * s


def _primitive_k(t, g2, p: PenaltyParams):
    # integral of k_eps(tau - g2) d tau from 0 to t
    excess = np.maximum(t - g2, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        extra = excess * (excess / p.eps) ** p.r / (p.r + 1.0)
    return t + np.where(excess > 0.0, extra, 0.0)


def _primitive_theta(s, p: PenaltyParams):
    # integral of theta_eps from 0 to s; convex, nonnegative
    s = np.asarray(s, dtype=float)
    with np.errstate(invalid="ignore"):
        mid = s * s / (2.0 * p.eps)
        low = -s - 0.5 * p.eps
    return np.where(s >= 0.0, 0.0, np.where(s > -p.eps, mid, low))


@dataclass
class DiscreteData:
    """Problem data sampled on a grid.

    ``psi`` is ``-inf`` and ``contact_coef`` zero when there is no obstacle;
    ``g_samples`` is ``+inf`` when there is no gradient constraint.
    """

    grid: Grid
    f: np.ndarray
    psi: np.ndarray
    laplacian_psi: np.ndarray
    contact_coef: np.ndarray
    g_samples: np.ndarray
    g_nodes: np.ndarray
    problem: Problem | None = None

    @property
    def has_obstacle(self) -> bool:
        return bool(np.isfinite(self.psi).any())

    @property
    def has_gradient_bound(self) -> bool:
        return bool(np.isfinite(self.g_samples).any())


def _fd_laplacian(expr, coords, spacing):
    lap = np.zeros(len(coords))
    center = evaluate(expr, coords)
    for axis, h in enumerate(spacing):
        shift = np.zeros(coords.shape[1])
        shift[axis] = h
        lap += (evaluate(expr, coords + shift) - 2.0 * center + evaluate(expr, coords - shift)) / h**2
    return lap


def discretize_problem(problem: Problem, grid: Grid) -> DiscreteData:
    """Evaluate ``f``, ``g``, ``psi`` and ``(-Lap psi - f)^+`` on ``grid``.

    The Laplacian of ``psi`` comes from ``problem.laplacian_psi`` when given,
    otherwise from centered second differences of the expression at the
    grid spacing.
    """
    x = grid.coords
    f = evaluate(problem.f, x)
    if problem.psi is None:
        psi = np.full(grid.size, -np.inf)
        lap_psi = np.zeros(grid.size)
        coef = np.zeros(grid.size)
    else:
        psi = evaluate(problem.psi, x)
        if problem.laplacian_psi is not None:
            lap_psi = evaluate(problem.laplacian_psi, x)
        else:
            lap_psi = _fd_laplacian(problem.psi, x, grid.spacing)
        coef = np.maximum(-lap_psi - f, 0.0)
    if problem.g is None:
        g_samples = np.full(grid.n_samples, np.inf)
        g_nodes = np.full(grid.size, np.inf)
    else:
        g_samples = evaluate(problem.g, grid.sample_coords)
        g_nodes = evaluate(problem.g, x)
    return DiscreteData(grid, f, psi, lap_psi, coef, g_samples, g_nodes, problem)


@dataclass
class AssembledSystem:
    residual: np.ndarray
    jacobian: sp.csr_matrix
    khat: np.ndarray
    theta: np.ndarray
    grad: np.ndarray

    def khat_nodes(self, grid: Grid) -> np.ndarray:
        return grid.sample_to_node @ self.khat


def _excess(grad, data):
    with np.errstate(invalid="ignore"):
        return np.sum(grad**2, axis=1) - data.g_samples**2


def principal_operator(u, data: DiscreteData, p: PenaltyParams) -> np.ndarray:
    """``-div(k_eps(|grad u|^2 - g^2) grad u)`` at every node."""
    grid = data.grid
    grad = grid.sample_gradient(u)
    k = k_eps(_excess(grad, data), p)
    return -grid.sample_divergence(k[:, None] * grad)


def residual(u, data: DiscreteData, p: PenaltyParams) -> np.ndarray:
    grid = data.grid
    res = principal_operator(u, data, p)
    with np.errstate(invalid="ignore"):
        th = theta_eps(u - data.psi, p)
    res = res + data.contact_coef * th - data.f
    res[grid.boundary] = u[grid.boundary]
    return res


def F_eps(u, data: DiscreteData, p: PenaltyParams) -> np.ndarray:
    """Effective load ``f - (-Lap psi - f)^+ theta_eps(u - psi)``."""
    with np.errstate(invalid="ignore"):
        th = theta_eps(u - data.psi, p)
    return data.f - data.contact_coef * th


def energy_penalized(u, data: DiscreteData, p: PenaltyParams) -> float:
    """Discrete convex energy whose gradient (per cell volume) is the residual."""
    grid = data.grid
    grad = grid.sample_gradient(u)
    t = np.sum(grad**2, axis=1)
    with np.errstate(invalid="ignore"):
        g2 = data.g_samples**2
    dirichlet = 0.5 * np.sum(grid.sample_weights * _primitive_k(t, g2, p))
    inner = grid.interior
    with np.errstate(invalid="ignore"):
        pen = _primitive_theta(u[inner] - data.psi[inner], p)
    load = np.sum(data.contact_coef[inner] * pen - data.f[inner] * u[inner])
    return float(dirichlet + grid.cell_volume * load)


def assemble(u, data: DiscreteData, p: PenaltyParams) -> AssembledSystem:
    """Residual and exact (a.e.) Jacobian of the penalized problem.

    Boundary rows are identity rows and boundary columns are dropped, so
    the Jacobian stays symmetric.
    """
    grid = data.grid
    u = np.asarray(u, dtype=float)
    grad = grid.sample_gradient(u)
    s = _excess(grad, data)
    k = k_eps(s, p)
    dk = dk_eps(s, p)
    w = grid.sample_weights / grid.cell_volume
    ops = grid.sample_gradient_ops
    d = grid.dimension
    jac = None
    for a in range(d):
        for b in range(d):
            coef = 2.0 * dk * grad[:, a] * grad[:, b]
            if a == b:
                coef = coef + k
            block = ops[a].T @ sp.diags(w * coef) @ ops[b]
            jac = block if jac is None else jac + block
    with np.errstate(invalid="ignore"):
        gap = u - data.psi
    th = theta_eps(gap, p)
    jac = jac + sp.diags(data.contact_coef * dtheta_eps(gap, p))
    res = -grid.sample_divergence(k[:, None] * grad) + data.contact_coef * th - data.f
    res[grid.boundary] = u[grid.boundary]
    inner = (~grid.boundary).astype(float)
    jac = sp.diags(inner) @ jac @ sp.diags(inner) + sp.diags(grid.boundary.astype(float))
    return AssembledSystem(res, jac.tocsr(), k, th, grad)
