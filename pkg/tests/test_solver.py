import warnings

import numpy as np
import pytest
from conftest import ELASTIC_PLASTIC, INACTIVE, SCHEDULE, TRIVIAL, problem

from gradvi import PenaltyVISolver
from gradvi.grid import build_grid
from gradvi.penalty import PenaltyParams, discretize_problem, residual
from gradvi.solver import (
    MONITOR_COLUMNS,
    NonConvergence,
    SolveOptions,
    UnderResolvedSchedule,
    check_schedule,
    continuation_solve,
    default_schedule,
    solve_penalized,
)


def test_trivial_one_iteration():
    prob = problem(TRIVIAL)
    g = build_grid(prob.domain, 101)
    sol = solve_penalized(prob, g, PenaltyParams(0.1))
    assert sol.converged
    assert sol.newton_iters <= 1
    np.testing.assert_array_equal(sol.u, 0.0)


def test_inactive_constraint_is_poisson():
    prob = problem(INACTIVE)
    g = build_grid(prob.domain, 101)
    x = g.coords[:, 0]
    for eps in (1e-1, 1e-3):
        sol = solve_penalized(prob, g, PenaltyParams(eps))
        assert sol.converged
        assert np.max(np.abs(sol.u - 0.25 * (1 - x**2))) <= 1e-8
        np.testing.assert_array_equal(sol.khat, 1.0)
        np.testing.assert_array_equal(sol.theta, 0.0)


def test_elastic_plastic_gradient_bound():
    prob = problem(ELASTIC_PLASTIC)
    g = build_grid(prob.domain, 2001)
    cr = continuation_solve(prob, g, [1e-1, 1e-2, 1e-3])
    sol = cr.final
    mag = np.abs(g.sample_gradient(sol.u)[:, 0])
    assert np.max(mag - 1.0) <= 0.05
    assert sol.residual_norm <= max(sol.tolerance, 1e-8)


def test_converged_respects_tolerance(ep_run):
    for e in ep_run.entries:
        assert e.converged
        assert e.residual_norm <= e.tolerance
        assert e.tolerance >= 1e-8
        assert np.all(e.khat >= 1.0)
        np.testing.assert_array_equal(e.u[ep_run.grid.boundary], 0.0)
        res = residual(e.u, ep_run.data, e.params)
        assert np.all(np.isfinite(res))


def test_cauchy_behaviour(ep_run):
    us = [e.u for e in ep_run.entries]
    diffs = [np.max(np.abs(a - b)) for a, b in zip(us, us[1:])]
    assert all(b < a for a, b in zip(diffs, diffs[1:]))


def test_monitors_bounded(ep_run):
    mons = ep_run.monitors
    l1 = [m["L1_khat"] for m in mons]
    assert max(l1) <= 2.0 * l1[0]
    for key in ("L1_khat", "Lp_khat", "L2r_grad", "L2_flux"):
        vals = [m[key] for m in mons]
        assert max(vals[-1] / vals[0], vals[0] / vals[-1]) <= 10.0


def test_meas_a_eps_decay(ep_run):
    mons = ep_run.monitors
    r = ep_run.r
    c = mons[0]["measAeps"] / mons[0]["eps"] ** (r / 2)
    for m in mons:
        assert m["measAeps"] <= c * m["eps"] ** (r / 2) * (1 + 1e-12)


def test_boundary_diagnostic_reported(ep_run):
    for m in ep_run.monitors:
        assert np.isfinite(m["boundary_excess"])
        assert m["boundary_constant"] == pytest.approx(m["boundary_excess"] / m["eps"])


def test_uniqueness_from_two_starts():
    prob = problem(ELASTIC_PLASTIC)
    g = build_grid(prob.domain, 201)
    x = g.coords[:, 0]
    rng = np.random.default_rng(3)
    init = 0.3 * (1 - x**2) + 0.05 * np.sin(np.pi * (x + 1)) * rng.standard_normal()
    init[g.boundary] = 0.0
    opts = SolveOptions(residual_tol=1e-8)
    p = PenaltyParams(1e-2)
    a = solve_penalized(prob, g, p, None, opts)
    b = solve_penalized(prob, g, p, init, opts)
    assert a.converged and b.converged
    assert np.max(np.abs(a.u - b.u)) <= 10 * opts.residual_tol


def test_obstacle_penetration_small_grid():
    prob = problem({"domain": {"dim": 1, "bounds": [[-1, 1]]}, "f": "-4", "g": "1",
                    "psi": "-0.3"})
    for n in (101, 201):
        g = build_grid(prob.domain, n)
        cr = continuation_solve(prob, g, [1e-1, 1e-2, 1e-3])
        for e in cr.entries:
            gap = e.u - cr.data.psi
            assert np.min(gap[g.interior]) >= -e.eps - 10 * g.h**2


def test_trivial_continuation():
    prob = problem(TRIVIAL)
    g = build_grid(prob.domain, 101)
    cr = continuation_solve(prob, g, [1e-1, 1e-2, 1e-3])
    for e in cr.entries:
        np.testing.assert_array_equal(e.u, 0.0)
    table = np.array(cr.monitor_table())
    for col in ("L1_khat", "Lp_khat", "L2r_grad", "L2_flux", "measAeps"):
        j = MONITOR_COLUMNS.index(col)
        assert np.all(table[:, j] == table[0, j])


def test_monitor_csv(tmp_path, ep_run):
    path = tmp_path / "m.csv"
    ep_run.write_monitors(path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(MONITOR_COLUMNS)
    assert len(lines) == 1 + len(SCHEDULE)


def test_schedule_checks():
    g = build_grid(problem(TRIVIAL).domain, 101)
    assert default_schedule() == SCHEDULE
    with pytest.raises(ValueError):
        check_schedule([], g)
    with pytest.raises(ValueError):
        check_schedule([1e-2, 1e-1], g)
    with pytest.raises(ValueError):
        check_schedule([1.5], g)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(UnderResolvedSchedule):
            check_schedule([1e-1, 1e-5], g)
        assert check_schedule([1e-1, 1e-5], g, allow_underresolved=True)[-1] == 1e-5


def test_options_validation():
    with pytest.raises(ValueError):
        SolveOptions(residual_tol=0.0)
    with pytest.raises(ValueError):
        SolveOptions(shrink=1.0)
    with pytest.raises(ValueError):
        SolveOptions(linear_solver="qr")


def test_nonconvergence_raised():
    prob = problem(ELASTIC_PLASTIC)
    g = build_grid(prob.domain, 201)
    opts = SolveOptions(max_newton_iters=1, max_refinements=0)
    with pytest.raises(NonConvergence) as info:
        continuation_solve(prob, g, [1e-1, 1e-3], opts=opts)
    assert info.value.result is not None
    sol = solve_penalized(prob, g, PenaltyParams(1e-3), None, opts)
    assert not sol.converged


def test_cg_matches_direct():
    prob = problem(ELASTIC_PLASTIC).replace(
        domain=problem({"domain": {"dim": 2, "bounds": [[-1, 1], [-1, 1]]}, "f": "0"}).domain)
    g = build_grid(prob.domain, 17)
    p = PenaltyParams(0.1)
    a = solve_penalized(prob, g, p, None, SolveOptions())
    b = solve_penalized(prob, g, p, None, SolveOptions(linear_solver="cg"))
    assert a.converged and b.converged
    assert np.max(np.abs(a.u - b.u)) <= 1e-7


def test_estimator_api():
    est = PenaltyVISolver(n=201, eps_schedule=(1e-1, 1e-2, 1e-3))
    assert est.get_params()["n"] == 201
    est.fit(problem(ELASTIC_PLASTIC))
    val = est.predict(np.array([0.0, 0.75]))
    np.testing.assert_allclose(val, [0.75, 0.25], atol=2e-2)
    assert est.result_.final.eps == 1e-3
