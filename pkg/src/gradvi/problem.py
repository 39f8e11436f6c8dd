"""Problem data: closed-form expressions, box domains and hypothesis checks.

Data fields are written as plain arithmetic strings over the coordinate
variables (``x``, ``y`` or ``x1``, ``x2``).  They are parsed with the
standard :mod:`ast` module and evaluated with numpy, restricted to a small
whitelist of operations.
"""

from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "Domain",
    "Expression",
    "ExpressionError",
    "EvaluationError",
    "HypothesisCheck",
    "Problem",
    "ValidationReport",
    "parse_expression",
    "evaluate",
    "validate_data",
    "load_problem",
]

FUNCTIONS = {
    "abs": (1, np.abs),
    "exp": (1, np.exp),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "min": (2, np.minimum),
    "max": (2, np.maximum),
}

# aliases for the coordinate axes
AXIS_NAMES = {"x": 0, "y": 1, "x1": 0, "x2": 1}

TOL_SIGN = 1e-10


class ExpressionError(ValueError):
    """Malformed expression text; ``position`` is a 1-based column."""

    def __init__(self, message: str, position: int | None = None, text: str = ""):
        self.position = position
        self.text = text
        where = f" at position {position}" if position is not None else ""
        super().__init__(f"{message}{where}: {text!r}")


class EvaluationError(ArithmeticError):
    def __init__(self, message: str, point=None):
        self.point = None if point is None else tuple(float(v) for v in np.atleast_1d(point))
        where = f" at point {self.point}" if self.point is not None else ""
        super().__init__(f"{message}{where}")


@dataclass(frozen=True)
class Domain:
    """Axis-aligned box ``prod_i (a_i, b_i)`` in one or two dimensions."""

    bounds: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bounds = tuple((float(a), float(b)) for a, b in self.bounds)
        if len(bounds) not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {len(bounds)}")
        for a, b in bounds:
            if not a < b:
                raise ValueError(f"empty interval ({a}, {b})")
        object.__setattr__(self, "bounds", bounds)

    @property
    def dimension(self) -> int:
        return len(self.bounds)

    @property
    def diameter(self) -> float:
        return math.sqrt(sum((b - a) ** 2 for a, b in self.bounds))

    @property
    def volume(self) -> float:
        return math.prod(b - a for a, b in self.bounds)

    @classmethod
    def from_dict(cls, data: Mapping) -> "Domain":
        bounds = tuple(tuple(b) for b in data["bounds"])
        dim = data.get("dim", len(bounds))
        if dim != len(bounds):
            raise ValueError(f"dim={dim} does not match {len(bounds)} bounds")
        return cls(bounds)

    def to_dict(self) -> dict:
        return {"dim": self.dimension, "bounds": [list(b) for b in self.bounds]}


@dataclass(frozen=True)
class Expression:
    """A parsed closed-form expression.

    ``text`` is the original input and is echoed verbatim in reports.
    ``params`` lists extra scalar symbols (e.g. a sequence index ``n``)
    that must be bound before evaluation.
    """

    text: str
    tree: ast.Expression = field(repr=False, compare=False)
    variables: frozenset = frozenset()
    params: tuple[str, ...] = ()
    bound: tuple[tuple[str, float], ...] = ()

    @property
    def dimension(self) -> int:
        return 1 + max((AXIS_NAMES[v] for v in self.variables), default=0)

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def bind(self, **values: float) -> "Expression":
        unknown = set(values) - set(self.params)
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)} for {self.text!r}")
        merged = dict(self.bound)
        merged.update({k: float(v) for k, v in values.items()})
        return Expression(self.text, self.tree, self.variables, self.params,
                          tuple(sorted(merged.items())))

    def __call__(self, points) -> np.ndarray | float:
        return evaluate(self, points)


def _to_python_syntax(text: str) -> tuple[str, list[int]]:
    """Replace ``^`` by ``**``; return the new text and a column map back."""
    out, colmap = [], []
    for i, ch in enumerate(text):
        if ch == "^":
            out.append("**")
            colmap.extend([i, i])
        else:
            out.append(ch)
            colmap.append(i)
    colmap.append(len(text))
    return "".join(out), colmap


def _check_node(node: ast.AST, text: str, colmap: list[int], names: set[str],
                params: Sequence[str]) -> None:
    def pos(n):
        off = getattr(n, "col_offset", None)
        return None if off is None else colmap[min(off, len(colmap) - 1)] + 1

    if isinstance(node, ast.Expression):
        _check_node(node.body, text, colmap, names, params)
    elif isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError("only real constants are allowed", pos(node), text)
    elif isinstance(node, ast.Name):
        if node.id in AXIS_NAMES:
            names.add(node.id)
        elif node.id not in params:
            raise ExpressionError(f"unknown identifier {node.id!r}", pos(node), text)
    elif isinstance(node, ast.BinOp):
        if not isinstance(node.op, (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)):
            raise ExpressionError("unsupported operator", pos(node), text)
        _check_node(node.left, text, colmap, names, params)
        _check_node(node.right, text, colmap, names, params)
    elif isinstance(node, ast.UnaryOp):
        if not isinstance(node.op, (ast.USub, ast.UAdd)):
            raise ExpressionError("unsupported unary operator", pos(node), text)
        _check_node(node.operand, text, colmap, names, params)
    elif isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in FUNCTIONS:
            fname = getattr(node.func, "id", "?")
            raise ExpressionError(f"unknown function {fname!r}", pos(node), text)
        arity = FUNCTIONS[node.func.id][0]
        if node.keywords or len(node.args) != arity:
            raise ExpressionError(
                f"{node.func.id} takes exactly {arity} argument(s)", pos(node), text)
        for arg in node.args:
            _check_node(arg, text, colmap, names, params)
    else:
        raise ExpressionError(f"unsupported syntax {type(node).__name__}", pos(node), text)


def parse_expression(text: str, params: Sequence[str] = ()) -> Expression:
    """Parse ``text`` into an :class:`Expression`.

    Raises :class:`ExpressionError` carrying the 1-based column of the
    offending token for syntax errors and unknown identifiers.
    """
    if not isinstance(text, str):
        text = repr(text) if isinstance(text, (int, float)) else str(text)
    if not text.strip():
        raise ExpressionError("empty expression", 1, text)
    src, colmap = _to_python_syntax(text)
    lead = len(src) - len(src.lstrip())
    src, colmap = src[lead:], colmap[lead:]
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        off = (exc.offset or 1) - 1
        raise ExpressionError("syntax error", colmap[min(max(off, 0), len(colmap) - 1)] + 1,
                              text) from None
    names: set[str] = set()
    _check_node(tree, text, colmap, names, tuple(params))
    if "x" in names and "x1" in names or "y" in names and "x2" in names:
        raise ExpressionError("mixes x/y and x1/x2 naming", None, text)
    return Expression(text, tree, frozenset(names), tuple(params))


def _eval_node(node, coords, env):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body, coords, env)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        if node.id in AXIS_NAMES:
            return coords[AXIS_NAMES[node.id]]
        return env[node.id]
    if isinstance(node, ast.UnaryOp):
        val = _eval_node(node.operand, coords, env)
        return -val if isinstance(node.op, ast.USub) else val
    if isinstance(node, ast.BinOp):
        left = _eval_node(node.left, coords, env)
        right = _eval_node(node.right, coords, env)
        op = node.op
        if isinstance(op, ast.Add):
            return np.add(left, right)
        if isinstance(op, ast.Sub):
            return np.subtract(left, right)
        if isinstance(op, ast.Mult):
            return np.multiply(left, right)
        if isinstance(op, ast.Div):
            return np.divide(left, right)
        return np.power(left, right)
    if isinstance(node, ast.Call):
        fn = FUNCTIONS[node.func.id][1]
        return fn(*(_eval_node(a, coords, env) for a in node.args))
    raise TypeError(type(node))  # unreachable after _check_node


def evaluate(expr: Expression, points) -> np.ndarray | float:
    """Evaluate ``expr`` at one point (shape ``(d,)``) or many (``(m, d)``).

    Division by zero and invalid powers raise :class:`EvaluationError`
    naming the first offending point.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim <= 1
    pts2 = np.atleast_2d(pts.reshape(1, -1) if single else pts)
    if expr.variables and pts2.shape[1] < expr.dimension:
        raise ValueError(
            f"expression {expr.text!r} needs {expr.dimension} coordinates, got {pts2.shape[1]}")
    missing = set(expr.params) - {k for k, _ in expr.bound}
    if missing:
        raise ValueError(f"unbound parameters {sorted(missing)} in {expr.text!r}")
    coords = [pts2[:, i] for i in range(pts2.shape[1])]
    try:
        with np.errstate(divide="raise", invalid="raise", over="raise"):
            val = _eval_node(expr.tree, coords, dict(expr.bound))
    except FloatingPointError as exc:
        bad = _locate_failure(expr, pts2)
        raise EvaluationError(f"{exc} in {expr.text!r}", bad) from None
    val = np.broadcast_to(np.asarray(val, dtype=float), (pts2.shape[0],)).copy()
    if not np.all(np.isfinite(val)):
        bad = pts2[np.argmax(~np.isfinite(val))]
        raise EvaluationError(f"non-finite value of {expr.text!r}", bad)
    return float(val[0]) if single else val


def _locate_failure(expr, pts):
    env = dict(expr.bound)
    for p in pts:
        try:
            with np.errstate(divide="raise", invalid="raise", over="raise"):
                _eval_node(expr.tree, [np.float64(c) for c in p], env)
        except FloatingPointError:
            return p
    return None


def _as_expression(value, params=()) -> Expression | None:
    if value is None:
        return None
    if isinstance(value, Expression):
        return value
    return parse_expression(value, params)


@dataclass(frozen=True)
class Problem:
    """Obstacle / gradient-constraint problem data on a box.

    ``g=None`` drops the gradient constraint and ``psi=None`` drops the
    obstacle; both are used by the embedding experiments.
    """

    domain: Domain
    f: Expression
    g: Expression | None = None
    psi: Expression | None = None
    laplacian_psi: Expression | None = None

    def __post_init__(self):
        for name in ("f", "g", "psi", "laplacian_psi"):
            object.__setattr__(self, name, _as_expression(getattr(self, name)))
        if self.f is None:
            raise ValueError("force term f is required")
        for name in ("f", "g", "psi", "laplacian_psi"):
            expr = getattr(self, name)
            if expr is not None and expr.variables and expr.dimension > self.domain.dimension:
                raise ValueError(f"{name}={expr.text!r} uses more coordinates than the domain")

    @property
    def dimension(self) -> int:
        return self.domain.dimension

    @classmethod
    def from_dict(cls, data: Mapping) -> "Problem":
        return cls(
            domain=Domain.from_dict(data["domain"]),
            f=data["f"],
            g=data.get("g"),
            psi=data.get("psi"),
            laplacian_psi=data.get("laplacian_psi"),
        )

    def to_dict(self) -> dict:
        out = {"domain": self.domain.to_dict(), "f": self.f.text}
        for name in ("g", "psi", "laplacian_psi"):
            expr = getattr(self, name)
            out[name] = None if expr is None else expr.text
        return out

    def replace(self, **changes) -> "Problem":
        data = {"domain": self.domain, "f": self.f, "g": self.g, "psi": self.psi,
                "laplacian_psi": self.laplacian_psi}
        data.update(changes)
        return Problem(**data)


def load_problem(path) -> Problem:
    with open(Path(path)) as fh:
        return Problem.from_dict(json.load(fh))


@dataclass
class HypothesisCheck:
    name: str
    passed: bool
    worst: float
    witness: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "worst": self.worst,
                "witness": None if self.witness is None else list(self.witness)}


@dataclass
class ValidationReport:
    checks: list[HypothesisCheck]
    g_min: float | None
    grad_margin: float | None
    expressions: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[HypothesisCheck]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> HypothesisCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "g_min": self.g_min, "grad_margin": self.grad_margin,
                "expressions": self.expressions, "checks": [c.to_dict() for c in self.checks]}


def _sample_points(domain: Domain, n: int):
    axes = [np.linspace(a, b, n) for a, b in domain.bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    on_boundary = np.zeros(len(pts), dtype=bool)
    for i, (a, b) in enumerate(domain.bounds):
        on_boundary |= (pts[:, i] == a) | (pts[:, i] == b)
    steps = [(b - a) / (n - 1) for a, b in domain.bounds]
    return pts, on_boundary, steps


def _shifted(pts, axis, delta):
    out = pts.copy()
    out[:, axis] += delta
    return out


def validate_data(p: Problem, n: int = 41, tol_sign: float = TOL_SIGN) -> ValidationReport:
    """Check the standing hypotheses on an ``n``-per-axis sample grid.

    Sampled checks: ``min g > 0``, ``Laplacian(g^2) <= tol_sign`` (centered
    second differences), ``psi <= 0`` on the boundary and the strict bound
    ``|grad psi| < g`` (centered differences).  Hypotheses whose data are
    absent (``g`` or ``psi`` is ``None``) are skipped.
    """
    if n < 3:
        raise ValueError("need at least 3 samples per axis")
    pts, on_boundary, steps = _sample_points(p.domain, n)
    checks: list[HypothesisCheck] = []
    g_min = margin = None

    def witness(i):
        return tuple(float(v) for v in pts[i])

    g_vals = None
    if p.g is not None:
        g_vals = evaluate(p.g, pts)
        i = int(np.argmin(g_vals))
        g_min = float(g_vals[i])
        checks.append(HypothesisCheck("g_positive", g_min > 0, g_min,
                                      None if g_min > 0 else witness(i)))
        lap = np.zeros(len(pts))
        g2 = g_vals**2
        for axis, h in enumerate(steps):
            plus = evaluate(p.g, _shifted(pts, axis, h)) ** 2
            minus = evaluate(p.g, _shifted(pts, axis, -h)) ** 2
            lap += (plus - 2.0 * g2 + minus) / h**2
        i = int(np.argmax(lap))
        worst = float(max(lap[i], 0.0))
        ok = lap[i] <= tol_sign
        checks.append(HypothesisCheck("laplacian_g2_nonpositive", bool(ok), worst,
                                      None if ok else witness(i)))

    if p.psi is not None:
        psi_vals = evaluate(p.psi, pts)
        bvals = np.where(on_boundary, psi_vals, -np.inf)
        i = int(np.argmax(bvals))
        worst = float(max(bvals[i], 0.0))
        ok = bvals[i] <= 0.0
        checks.append(HypothesisCheck("psi_boundary_nonpositive", bool(ok), worst,
                                      None if ok else witness(i)))
        if g_vals is not None:
            grad2 = np.zeros(len(pts))
            for axis, h in enumerate(steps):
                plus = evaluate(p.psi, _shifted(pts, axis, h))
                minus = evaluate(p.psi, _shifted(pts, axis, -h))
                grad2 += ((plus - minus) / (2.0 * h)) ** 2
            gap = g_vals - np.sqrt(grad2)
            i = int(np.argmin(gap))
            margin = float(gap[i])
            ok = margin > 0.0
            checks.append(HypothesisCheck("grad_psi_below_g", bool(ok), float(max(-margin, 0.0)),
                                          None if ok else witness(i)))

    expressions = {k: v for k, v in p.to_dict().items() if k != "domain"}
    return ValidationReport(checks, g_min, margin, expressions)
