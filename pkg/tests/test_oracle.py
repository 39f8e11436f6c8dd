import numpy as np
import pytest
from conftest import (
    ELASTIC_PLASTIC,
    INACTIVE,
    OBSTACLE_1D,
    TRIVIAL,
    elastic_plastic_exact,
    obstacle_exact,
    problem,
)

from gradvi import AdmmVISolver
from gradvi.grid import build_grid
from gradvi.oracle import (
    AdmmOptions,
    IllPosedData,
    InfeasibleInput,
    MaxItersExceeded,
    constraint_violations,
    energy,
    project_ball,
    project_obstacle,
    solve_vi_admm,
    vi_residual_check,
)
from gradvi.penalty import discretize_problem


def test_energy_zero():
    prob = problem(INACTIVE)
    g = build_grid(prob.domain, 21)
    assert energy(np.zeros(g.size), prob, g) == 0.0


def test_energy_unconstrained_minimizer():
    prob = problem(INACTIVE)
    g = build_grid(prob.domain, 201)
    x = g.coords[:, 0]
    assert energy(0.25 * (1 - x**2), prob, g) == pytest.approx(-1 / 12, abs=1e-4)


def test_energy_scaling():
    prob = problem(INACTIVE)
    g = build_grid(prob.domain, 51)
    x = g.coords[:, 0]
    v = np.sin(np.pi * (x + 1) / 2) * (1 - x**2)
    zero = problem(dict(INACTIVE, f="0"))
    dirichlet = energy(v, zero, g)
    load = dirichlet - energy(v, prob, g)
    assert energy(2 * v, prob, g) == pytest.approx(4 * dirichlet - 2 * load, rel=1e-13)


def test_energy_needs_zero_boundary():
    prob = problem(INACTIVE)
    g = build_grid(prob.domain, 21)
    with pytest.raises(ValueError):
        energy(np.ones(g.size), prob, g)


def test_project_ball_examples():
    np.testing.assert_array_equal(project_ball(np.array([3.0, 4.0]), 5.0), [3.0, 4.0])
    np.testing.assert_allclose(project_ball(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
    np.testing.assert_array_equal(project_ball(np.zeros(2), 1.0), [0.0, 0.0])
    rows = project_ball(np.array([[3.0, 4.0], [0.3, 0.4]]), np.array([1.0, 1.0]))
    np.testing.assert_allclose(rows, [[0.6, 0.8], [0.3, 0.4]])
    with pytest.raises(ValueError):
        project_ball(np.ones(2), -1.0)


def test_project_obstacle_examples():
    psi = np.zeros(4)
    v = np.array([1.0, 2.0, 0.5, 3.0])
    np.testing.assert_array_equal(project_obstacle(v, psi), v)
    np.testing.assert_array_equal(project_obstacle(-np.ones(4), psi), 0.0)
    mixed = np.array([-1.0, 2.0, -0.5, 0.25])
    np.testing.assert_array_equal(project_obstacle(mixed, psi),
                                  [max(a, 0.0) for a in mixed])


def test_trivial_zero():
    prob = problem(TRIVIAL)
    g = build_grid(prob.domain, 101)
    sol = solve_vi_admm(prob, g)
    assert sol.converged
    assert np.max(np.abs(sol.u)) <= 1e-12


def test_elastic_plastic_closed_form(ep_oracle):
    x = ep_oracle.grid.coords[:, 0]
    assert ep_oracle.converged
    assert np.max(np.abs(ep_oracle.u - elastic_plastic_exact(x))) <= 5e-3
    assert ep_oracle.u[len(x) // 2] == pytest.approx(0.75, abs=5e-3)


def test_feasibility(ep_oracle, obs_oracle):
    for sol in (ep_oracle, obs_oracle):
        assert sol.grad_violation <= 1e-6
        assert sol.obstacle_violation <= 1e-8


@pytest.fixture(scope="module")
def fine_obstacle():
    prob = problem(OBSTACLE_1D)
    return solve_vi_admm(prob, build_grid(prob.domain, 4001))


def test_obstacle_fine_grid_reference(fine_obstacle, obs_oracle):
    fine = fine_obstacle
    # closed form of the continuum problem
    x = fine.grid.coords[:, 0]
    assert np.max(np.abs(fine.u - obstacle_exact(x))) <= 1e-3
    # coarse grid agrees with the fine reference at shared nodes
    coarse = obs_oracle.u
    assert np.max(np.abs(fine.u[::2] - coarse)) <= 1e-3
    contact = np.abs(x) < 0.5
    np.testing.assert_allclose(fine.u[contact], -0.3, atol=1e-8)


def test_energy_optimality(obs_oracle):
    prob = problem(OBSTACLE_1D)
    g = obs_oracle.grid
    data = discretize_problem(prob, g)
    rng = np.random.default_rng(7)
    base = energy(obs_oracle.u, data, g)
    x = g.coords[:, 0]
    for _ in range(100):
        # random admissible field: scaled sine series lifted above psi
        coef = rng.standard_normal(6) / np.arange(1, 7) ** 2
        v = sum(c * np.sin((k + 1) * np.pi * (x + 1) / 2) for k, c in enumerate(coef))
        slope = np.max(np.abs(g.sample_gradient(v)))
        v = v * rng.uniform(0.1, 1.0) / slope
        v = np.maximum(v, -0.3)
        v[g.boundary] = 0.0
        gv, ov = constraint_violations(v, data, g)
        assert gv <= 1e-12 and ov == 0.0
        assert energy(v, data, g) >= base - 1e-12


def test_two_rho_agree():
    prob = problem(OBSTACLE_1D)
    g = build_grid(prob.domain, 501)
    a = solve_vi_admm(prob, g, AdmmOptions(rho=1.0))
    b = solve_vi_admm(prob, g, AdmmOptions(rho=10.0))
    assert np.max(np.abs(a.u - b.u)) <= 1e-5


def test_penalty_limit_equivalence(obs_run, obs_oracle):
    errs = [np.max(np.abs(e.u - obs_oracle.u)) for e in obs_run.entries]
    assert all(b < a for a, b in zip(errs, errs[1:]))


def test_vi_check_oracle(ep_oracle):
    rep = vi_residual_check(ep_oracle.u, problem(ELASTIC_PLASTIC), ep_oracle.grid)
    assert rep.passed
    assert rep.worst_margin >= -1e-6 * rep.scale
    assert rep.margins.size == 100


def test_vi_check_unconstrained_equality():
    prob = problem(INACTIVE)
    g = build_grid(prob.domain, 101)
    x = g.coords[:, 0]
    # the 3-point scheme is exact on quadratics: discrete Poisson solution
    u = 0.25 * (1 - x**2)
    rep = vi_residual_check(u, prob, g)
    assert rep.worst_margin >= -1e-12 * rep.scale
    np.testing.assert_allclose(rep.margins, 0.0, atol=1e-12 * rep.scale)


def test_vi_check_perturbed_fails(ep_oracle):
    g = ep_oracle.grid
    x = g.coords[:, 0]
    bump = np.where(np.abs(x) < 0.3, (0.09 - x**2) ** 2, 0.0)
    pert = ep_oracle.u + 0.5 * bump
    # the solution itself is admissible and certifies the failure
    rep = vi_residual_check(pert, problem(ELASTIC_PLASTIC), g, trial_count=10,
                            extra_trials=[ep_oracle.u])
    assert not rep.passed
    assert rep.margins[-1] < -rep.tol


def test_vi_check_rejects_infeasible():
    prob = problem(ELASTIC_PLASTIC)
    g = build_grid(prob.domain, 101)
    x = g.coords[:, 0]
    with pytest.raises(InfeasibleInput):
        vi_residual_check(2 * (1 - np.abs(x)), prob, g)


def test_max_iters_flagged():
    prob = problem(ELASTIC_PLASTIC)
    g = build_grid(prob.domain, 101)
    with pytest.raises(MaxItersExceeded) as info:
        solve_vi_admm(prob, g, AdmmOptions(max_iters=1))
    assert not info.value.solution.converged
    sol = solve_vi_admm(prob, g, AdmmOptions(max_iters=1), raise_on_failure=False)
    assert sol.iterations == 1 and not sol.converged


def test_ill_posed_data():
    g = build_grid(problem(TRIVIAL).domain, 21)
    with pytest.raises(IllPosedData):
        solve_vi_admm(problem(dict(TRIVIAL, g="0")), g)
    with pytest.raises(IllPosedData):
        solve_vi_admm(problem(dict(TRIVIAL, psi="0.2")), g)


def test_options_validation():
    with pytest.raises(ValueError):
        AdmmOptions(rho=0.0)
    with pytest.raises(ValueError):
        AdmmOptions(relaxation=2.0)
    with pytest.raises(ValueError):
        AdmmOptions(primal_tol=0.0)


def test_history_csv(tmp_path):
    prob = problem(OBSTACLE_1D)
    g = build_grid(prob.domain, 101)
    sol = solve_vi_admm(prob, g)
    path = tmp_path / "h.csv"
    sol.write_history(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,primal_res,dual_res,energy"
    assert len(lines) == 1 + len(sol.history)


def test_estimator_api():
    est = AdmmVISolver(n=201).fit(problem(ELASTIC_PLASTIC))
    assert est.get_params()["rho"] == 1.0
    np.testing.assert_allclose(est.predict(np.array([0.0, 0.75])), [0.75, 0.25], atol=5e-3)
