"""Property tests for the invariants of every module."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradvi.grid import build_grid, divergence, gradient, laplacian, norm_lp
from gradvi.oracle import project_ball, project_obstacle
from gradvi.penalty import (
    F_eps,
    PenaltyParams,
    discretize_problem,
    k_eps,
    phi_eps,
    theta_eps,
)
from gradvi.problem import Domain, Problem, parse_expression
from gradvi.solver import SolveOptions, continuation_solve

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
eps_st = st.floats(1e-4, 0.9)
r_st = st.sampled_from([2.5, 3.0, 4.0, 6.0])
LINE = Domain.from_dict({"dim": 1, "bounds": [[-1, 1]]})
BOX = Domain.from_dict({"dim": 2, "bounds": [[-1, 1], [0, 1]]})


@given(s1=st.floats(-3, 3), s2=st.floats(-3, 3), a=st.floats(0, 4), eps=eps_st, r=r_st)
def test_phi_monotone(s1, s2, a, eps, r):
    p = PenaltyParams(eps, r)
    lo, hi = min(s1, s2), max(s1, s2)
    assert phi_eps(hi, a, p) >= phi_eps(lo, a, p)


@given(s=finite, t=finite, eps=eps_st, r=r_st)
def test_k_theta_ranges_and_monotone(s, t, eps, r):
    p = PenaltyParams(eps, r)
    assert k_eps(s, p) >= 1.0
    assert -1.0 <= theta_eps(s, p) <= 0.0
    lo, hi = min(s, t), max(s, t)
    assert k_eps(hi, p) >= k_eps(lo, p)
    assert theta_eps(hi, p) >= theta_eps(lo, p)


@given(a=st.integers(-9, 9), b=st.integers(-9, 9), c=st.integers(1, 9),
       x=st.floats(-5, 5))
def test_parse_matches_python(a, b, c, x):
    text = f"{a}*x^2 + {b}*abs(x) - max(x, {c})/{c}"
    expected = a * x**2 + b * abs(x) - max(x, c) / c
    got = parse_expression(text)(np.array([x]))
    assert np.isclose(got, expected, rtol=1e-14, atol=1e-12)


@given(n=st.sampled_from([9, 17, 33]), seed=st.integers(0, 2**31 - 1),
       dom=st.sampled_from([LINE, BOX]))
def test_summation_by_parts(n, seed, dom):
    g = build_grid(dom, n)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(g.size)
    v[g.boundary] = 0.0
    w = rng.standard_normal((g.size, g.dimension))
    nw = g.node_weights
    lhs = np.sum(nw * divergence(g, w) * v)
    rhs = -np.sum(nw[:, None] * w * gradient(g, v))
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(rhs))


@given(coef=arrays(float, 6, elements=st.floats(-10, 10)))
def test_operators_exact_on_quadratics(coef):
    g = build_grid(BOX, 9)
    x, y = g.coords.T
    c0, cx, cy, cxx, cxy, cyy = coef
    v = c0 + cx * x + cy * y + cxx * x**2 + cxy * x * y + cyy * y**2
    inner = g.interior
    grad = gradient(g, v)[inner]
    scale = 1.0 + np.max(np.abs(coef))
    assert np.allclose(grad[:, 0], (cx + 2 * cxx * x + cxy * y)[inner], atol=1e-11 * scale)
    assert np.allclose(grad[:, 1], (cy + cxy * x + 2 * cyy * y)[inner], atol=1e-11 * scale)
    assert np.allclose(laplacian(g, v)[inner], 2 * (cxx + cyy), atol=1e-10 * scale)


scale_st = st.one_of(st.just(0.0), st.floats(1e-6, 1e3), st.floats(-1e3, -1e-6))


@given(v=arrays(float, 21, elements=st.floats(-1e3, 1e3)), c=scale_st,
       p=st.sampled_from([1.0, 2.0, 3.5, np.inf]))
def test_norm_homogeneous_and_monotone(v, c, p):
    g = build_grid(LINE, 21)
    n = norm_lp(g, v, p)
    assert np.isclose(norm_lp(g, c * v, p), abs(c) * n, rtol=1e-12, atol=1e-300)
    bigger = np.abs(v) + 1.0
    assert norm_lp(g, bigger, p) >= n


@given(z=arrays(float, (5, 2), elements=finite), radius=st.floats(0, 100))
def test_project_ball(z, radius):
    out = project_ball(z, np.full(5, radius))
    nz = np.linalg.norm(z, axis=1)
    assert np.all(np.linalg.norm(out, axis=1) <= radius * (1 + 1e-12) + 1e-300)
    inside = nz <= radius
    assert np.array_equal(out[inside], z[inside])
    np.testing.assert_allclose(project_ball(out, np.full(5, radius)), out, rtol=1e-12)


@given(v=arrays(float, 10, elements=finite), psi=arrays(float, 10, elements=finite))
def test_project_obstacle(v, psi):
    out = project_obstacle(v, psi)
    assert np.all(out >= psi)
    assert np.array_equal(project_obstacle(out, psi), out)
    assert np.all((out == v) | (out == psi))


@given(u=arrays(float, 41, elements=st.floats(-2, 2)), eps=eps_st)
def test_F_eps_bounds(u, eps):
    prob = Problem.from_dict({"domain": {"dim": 1, "bounds": [[-1, 1]]}, "f": "-4 + x",
                              "g": "1", "psi": "-0.3 + 0.1*x^2"})
    g = build_grid(prob.domain, 41)
    data = discretize_problem(prob, g)
    F = F_eps(u, data, PenaltyParams(eps))
    assert np.all(F >= data.f - 1e-12)
    assert np.all(F <= data.f + np.maximum(-data.laplacian_psi - data.f, 0) + 1e-12)


@settings(max_examples=15, deadline=None)
@given(level=st.floats(-0.6, -0.05), force=st.floats(-6, -1), eps=st.sampled_from([1e-1, 1e-2]))
def test_penetration_bound(level, force, eps):
    prob = Problem.from_dict({"domain": {"dim": 1, "bounds": [[-1, 1]]}, "f": repr(force),
                              "g": "1", "psi": repr(level)})
    g = build_grid(prob.domain, 101)
    cr = continuation_solve(prob, g, [1e-1, eps] if eps < 1e-1 else [eps], 4.0, SolveOptions())
    for e in cr.entries:
        gap = e.u - cr.data.psi
        assert np.min(gap[g.interior]) >= -e.eps - 10 * g.h**2
        assert np.all(e.khat >= 1.0)
