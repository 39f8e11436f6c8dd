import numpy as np
import pytest

from gradvi import Problem, SolveOptions, build_grid, continuation_solve
from gradvi.oracle import AdmmOptions, solve_vi_admm

SCHEDULE = [1e-1, 1e-2, 1e-3, 1e-4]

ELASTIC_PLASTIC = {"domain": {"dim": 1, "bounds": [[-1, 1]]}, "f": "2", "g": "1", "psi": "-10"}
OBSTACLE_1D = {"domain": {"dim": 1, "bounds": [[-1, 1]]}, "f": "-4", "g": "1", "psi": "-0.3"}
OBSTACLE_2D = {"domain": {"dim": 2, "bounds": [[-1, 1], [-1, 1]]}, "f": "-4", "g": "1",
               "psi": "-0.3"}
TRIVIAL = {"domain": {"dim": 1, "bounds": [[-1, 1]]}, "f": "0", "g": "1", "psi": "-1"}
INACTIVE = {"domain": {"dim": 1, "bounds": [[-1, 1]]}, "f": "0.5", "g": "1", "psi": "-10"}


def elastic_plastic_exact(x):
    x = np.abs(np.asarray(x, dtype=float))
    return np.where(x >= 0.5, 1.0 - x, 0.75 - x**2)


def obstacle_exact(x, a=0.575):
    # contact for |x| <= a, parabola u'' = 4 up to a + 1/4, then slope 1
    x = np.abs(np.asarray(x, dtype=float))
    return np.where(x <= a, -0.3, np.where(x <= a + 0.25, -0.3 + 2.0 * (x - a) ** 2, x - 1.0))


def problem(spec):
    return Problem.from_dict(spec)


@pytest.fixture(scope="session")
def ep_problem():
    return problem(ELASTIC_PLASTIC)


@pytest.fixture(scope="session")
def obs_problem():
    return problem(OBSTACLE_1D)


@pytest.fixture(scope="session")
def obs2d_problem():
    return problem(OBSTACLE_2D)


@pytest.fixture(scope="session")
def ep_run(ep_problem):
    grid = build_grid(ep_problem.domain, 2001)
    return continuation_solve(ep_problem, grid, SCHEDULE, 4.0, SolveOptions())


@pytest.fixture(scope="session")
def obs_run(obs_problem):
    grid = build_grid(obs_problem.domain, 2001)
    return continuation_solve(obs_problem, grid, SCHEDULE, 4.0, SolveOptions())


@pytest.fixture(scope="session")
def obs2d_run(obs2d_problem):
    grid = build_grid(obs2d_problem.domain, 65)
    return continuation_solve(obs2d_problem, grid, SCHEDULE, 4.0,
                              SolveOptions(allow_underresolved=True))


@pytest.fixture(scope="session")
def ep_oracle(ep_problem):
    grid = build_grid(ep_problem.domain, 2001)
    return solve_vi_admm(ep_problem, grid, AdmmOptions())


@pytest.fixture(scope="session")
def obs_oracle(obs_problem):
    grid = build_grid(obs_problem.domain, 2001)
    return solve_vi_admm(obs_problem, grid, AdmmOptions())


@pytest.fixture(scope="session")
def obs2d_oracle(obs2d_problem):
    grid = build_grid(obs2d_problem.domain, 65)
    return solve_vi_admm(obs2d_problem, grid, AdmmOptions())


# -- acceptance summary ---------------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criteria_log():
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[key])
