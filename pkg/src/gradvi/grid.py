"""Uniform tensor grids, nodal fields and finite-difference operators.

Two families of gradient live here.  The *nodal* gradient (centered
differences, one-sided at the boundary) is a summation-by-parts operator
for the trapezoidal weights and produces nodal vector fields for reporting.  The *sampled* gradient evaluates one-sided
differences at gradient sample points: edge midpoints in 1D, and the four
corners of every cell in 2D (each corner sees the two cell edges meeting
there).  The penalized operator and the energy are built from the sampled
gradient, which makes the discrete problem the gradient of a convex energy
and reduces to the 3-point / 5-point Laplacian when the coefficient is 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from .problem import Domain

__all__ = [
    "Grid",
    "build_grid",
    "gradient",
    "divergence",
    "laplacian",
    "norm_lp",
    "weighted_norm",
    "interpolate",
    "write_fields_csv",
    "read_fields_csv",
]


def _first_difference(n: int, h: float) -> sp.csr_matrix:
    """Centered first difference with one-sided end rows.

    With trapezoidal weights ``H`` this is ``H^-1 Q`` with
    ``Q + Q^T = diag(-1, 0, ..., 0, 1)``, the summation-by-parts property.
    """
    rows, cols, vals = [], [], []
    for i in range(1, n - 1):
        rows += [i, i]
        cols += [i - 1, i + 1]
        vals += [-0.5 / h, 0.5 / h]
    rows += [0, 0, n - 1, n - 1]
    cols += [0, 1, n - 2, n - 1]
    vals += [-1.0 / h, 1.0 / h, -1.0 / h, 1.0 / h]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _second_difference(n: int, h: float) -> sp.csr_matrix:
    main = np.full(n, -2.0 / h**2)
    off = np.full(n - 1, 1.0 / h**2)
    mat = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    mat[0, :] = 0.0
    mat[n - 1, :] = 0.0
    return mat.tocsr()


@dataclass(frozen=True, eq=False)
class Grid:
    """Nodes ``a_i + k h_i`` of a box, flattened in C order (``ij`` indexing)."""

    domain: Domain
    shape: tuple[int, ...]
    spacing: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        shape = tuple(int(n) for n in self.shape)
        if len(shape) != self.domain.dimension:
            raise ValueError(f"need {self.domain.dimension} point counts, got {len(shape)}")
        if any(n < 3 for n in shape):
            raise ValueError(f"at least 3 points per axis required, got {shape}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", tuple(
            (b - a) / (n - 1) for (a, b), n in zip(self.domain.bounds, shape)))

    @property
    def dimension(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def cell_volume(self) -> float:
        return math.prod(self.spacing)

    @property
    def h(self) -> float:
        return max(self.spacing)

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, n) for (a, b), n in zip(self.domain.bounds, self.shape)]

    @cached_property
    def coords(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def boundary(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.dimension, -1)
        mask = np.zeros(self.size, dtype=bool)
        for axis, n in enumerate(self.shape):
            mask |= (idx[axis] == 0) | (idx[axis] == n - 1)
        return mask

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    @cached_property
    def node_weights(self) -> np.ndarray:
        """Trapezoidal quadrature weights."""
        w1 = []
        for n, h in zip(self.shape, self.spacing):
            w = np.full(n, h)
            w[[0, -1]] = 0.5 * h
            w1.append(w)
        out = w1[0]
        for w in w1[1:]:
            out = np.multiply.outer(out, w)
        return np.ravel(out)

    # -- nodal operators ---------------------------------------------------

    @cached_property
    def nodal_gradient_ops(self) -> list[sp.csr_matrix]:
        d1 = [_first_difference(n, h) for n, h in zip(self.shape, self.spacing)]
        if self.dimension == 1:
            return d1
        nx, ny = self.shape
        return [sp.kron(d1[0], sp.identity(ny), format="csr"),
                sp.kron(sp.identity(nx), d1[1], format="csr")]

    @cached_property
    def laplacian_op(self) -> sp.csr_matrix:
        d2 = [_second_difference(n, h) for n, h in zip(self.shape, self.spacing)]
        if self.dimension == 1:
            return d2[0]
        nx, ny = self.shape
        lap = sp.kron(d2[0], sp.identity(ny)) + sp.kron(sp.identity(nx), d2[1])
        # rows of boundary nodes vanish
        keep = sp.diags((~self.boundary).astype(float))
        return (keep @ lap).tocsr()

    # -- sampled gradient --------------------------------------------------

    @cached_property
    def _sampling(self):
        if self.dimension == 1:
            (n,), (h,) = self.shape, self.spacing
            e = np.arange(n - 1)
            rows = np.repeat(e, 2)
            cols = np.stack([e, e + 1], axis=1).ravel()
            vals = np.tile([-1.0 / h, 1.0 / h], n - 1)
            g = sp.csr_matrix((vals, (rows, cols)), shape=(n - 1, n))
            weights = np.full(n - 1, h)
            x = self.axes[0]
            qcoords = (0.5 * (x[:-1] + x[1:]))[:, None]
            owners = np.stack([e, e + 1], axis=1)
            return [g], weights, qcoords, owners
        nx, ny = self.shape
        hx, hy = self.spacing
        node = np.arange(self.size).reshape(nx, ny)
        ci, cj = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), indexing="ij")
        ci, cj = ci.ravel(), cj.ravel()
        gx_r, gx_c, gx_v, gy_r, gy_c, gy_v, owner = [], [], [], [], [], [], []
        corners = [(0, 0), (1, 0), (0, 1), (1, 1)]
        ncell = ci.size
        for k, (cx, cy) in enumerate(corners):
            q = np.arange(ncell) * 4 + k
            gx_r += [q, q]
            gx_c += [node[ci, cj + cy], node[ci + 1, cj + cy]]
            gx_v += [np.full(ncell, -1.0 / hx), np.full(ncell, 1.0 / hx)]
            gy_r += [q, q]
            gy_c += [node[ci + cx, cj], node[ci + cx, cj + 1]]
            gy_v += [np.full(ncell, -1.0 / hy), np.full(ncell, 1.0 / hy)]
            owner.append((q, node[ci + cx, cj + cy]))
        nq = 4 * ncell
        gx = sp.csr_matrix((np.concatenate(gx_v), (np.concatenate(gx_r), np.concatenate(gx_c))),
                           shape=(nq, self.size))
        gy = sp.csr_matrix((np.concatenate(gy_v), (np.concatenate(gy_r), np.concatenate(gy_c))),
                           shape=(nq, self.size))
        owners = np.empty((nq, 1), dtype=int)
        for q, nd in owner:
            owners[q, 0] = nd
        weights = np.full(nq, 0.25 * hx * hy)
        qcoords = self.coords[owners[:, 0]]
        return [gx, gy], weights, qcoords, owners

    @property
    def sample_gradient_ops(self) -> list[sp.csr_matrix]:
        return self._sampling[0]

    @property
    def sample_weights(self) -> np.ndarray:
        return self._sampling[1]

    @property
    def sample_coords(self) -> np.ndarray:
        return self._sampling[2]

    @property
    def n_samples(self) -> int:
        return len(self._sampling[1])

    @cached_property
    def sample_to_node(self) -> sp.csr_matrix:
        """Weighted averaging of sample-point values onto adjacent nodes."""
        owners, w = self._sampling[3], self._sampling[1]
        nq, k = owners.shape
        mat = sp.csr_matrix((np.repeat(w, k), (owners.ravel(), np.repeat(np.arange(nq), k))),
                            shape=(self.size, nq))
        total = np.asarray(mat.sum(axis=1)).ravel()
        return (sp.diags(1.0 / total) @ mat).tocsr()

    @cached_property
    def sample_touches_boundary(self) -> np.ndarray:
        stencil = sum(abs(op) for op in self.sample_gradient_ops)
        touches = stencil @ self.boundary.astype(float)
        return touches > 0

    def sample_gradient(self, u: np.ndarray) -> np.ndarray:
        """Sampled gradient, shape ``(n_samples, d)``."""
        return np.stack([op @ u for op in self.sample_gradient_ops], axis=1)

    def sample_divergence(self, flux: np.ndarray) -> np.ndarray:
        """Negative adjoint of :meth:`sample_gradient` per unit cell volume.

        ``-sample_divergence(k * sample_gradient(u))`` is the flux-form
        operator ``-div(k grad u)`` at interior nodes.
        """
        w = self.sample_weights
        out = sum(op.T @ (w * flux[:, a]) for a, op in enumerate(self.sample_gradient_ops))
        return -np.asarray(out) / self.cell_volume

    def __repr__(self) -> str:
        return f"Grid(bounds={self.domain.bounds}, shape={self.shape})"


def build_grid(domain: Domain, n) -> Grid:
    """Uniform grid with ``n`` points per axis (int or one int per axis)."""
    if np.isscalar(n):
        n = (int(n),) * domain.dimension
    return Grid(domain, tuple(n))


def gradient(grid: Grid, v: np.ndarray) -> np.ndarray:
    """Nodal gradient, shape ``(size, d)``; exact on quadratics at interior nodes."""
    return np.stack([op @ v for op in grid.nodal_gradient_ops], axis=1)


def divergence(grid: Grid, w: np.ndarray) -> np.ndarray:
    """Divergence built from the same difference operators as :func:`gradient`.

    By summation by parts ``<divergence(w), v> = -<w, gradient(v)>`` in the
    trapezoidal inner product for every ``v`` vanishing on the boundary.
    """
    w = np.asarray(w).reshape(grid.size, grid.dimension)
    return np.asarray(sum(op @ w[:, a] for a, op in enumerate(grid.nodal_gradient_ops)))


def laplacian(grid: Grid, v: np.ndarray) -> np.ndarray:
    """3-point (1D) / 5-point (2D) Laplacian; zero on boundary nodes."""
    return grid.laplacian_op @ v


def weighted_norm(values: np.ndarray, weights: np.ndarray, p: float = 2.0) -> float:
    values = np.abs(np.asarray(values, dtype=float))
    if values.ndim > 1:
        values = np.sqrt(np.sum(values**2, axis=1))
    if np.isinf(p):
        return float(values.max(initial=0.0))
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    # fsum: exact, order-independent summation
    total = math.fsum((weights * values**p).tolist())
    return total ** (1.0 / p)


def norm_lp(grid: Grid, v: np.ndarray, p: float = 2.0) -> float:
    """Discrete ``L^p`` norm with trapezoidal weights; ``p=np.inf`` for max."""
    return weighted_norm(v, grid.node_weights, p)


def interpolate(grid: Grid, v: np.ndarray, points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, grid.dimension)
    interp = RegularGridInterpolator(grid.axes, np.asarray(v).reshape(grid.shape))
    return interp(pts)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_fields_csv(path, grid: Grid, columns: dict, metadata: dict | None = None) -> Path:
    """One row per node: coordinates then each column; JSON sidecar header.

    Vector columns of shape ``(size, d)`` expand to ``name_0 .. name_{d-1}``.
    """
    path = Path(path)
    names = ["x", "y"][: grid.dimension] if grid.dimension == 2 else ["x"]
    data = [grid.coords[:, i] for i in range(grid.dimension)]
    for name, arr in columns.items():
        arr = np.asarray(arr, dtype=float)
        if arr.ndim == 1:
            names.append(name)
            data.append(arr)
        else:
            for j in range(arr.shape[1]):
                names.append(f"{name}_{j}")
                data.append(arr[:, j])
    lines = [",".join(names)]
    for row in zip(*data):
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    header = {"domain": grid.domain.to_dict(), "shape": list(grid.shape),
              "spacing": list(grid.spacing), "columns": names}
    if metadata:
        header.update(metadata)
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return path


def read_fields_csv(path) -> tuple[Grid, dict[str, np.ndarray]]:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    grid = build_grid(Domain.from_dict(header["domain"]), header["shape"])
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    names = header["columns"]
    return grid, {name: table[:, i] for i, name in enumerate(names)}
