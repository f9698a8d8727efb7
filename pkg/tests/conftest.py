import numpy as np
import pytest

from mipdeco.balanced_truncation import reduce
from mipdeco.mesh_fem import assemble
from mipdeco.spacetime import KnapsackData, PenaltyProblem, TimeGrid, build_spacetime, forward_map


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def fem_quarter():
    """Poisson on h = 1/4 (25 vertices, 9 unknowns), 2x2 sources."""
    return assemble("poisson", 0.25, m=2)


@pytest.fixture(scope="session")
def fem_desk():
    return assemble("poisson", 2**-4, m=3)


@pytest.fixture(scope="session")
def fem_desk_cd():
    return assemble("convection_diffusion", 2**-4, m=3)


@pytest.fixture(scope="session")
def reduced_desk(fem_desk):
    return reduce(fem_desk, tol=1e-5)


@pytest.fixture(scope="session")
def tiny_fem():
    return assemble("poisson", 2**-3, m=2)


def make_problem(fem, n_t, S, u_star=None, seed=0):
    """Problem whose desired state is the state of ``u_star`` (random binary if omitted)."""
    op = build_spacetime(fem, TimeGrid(n_t))
    ks = KnapsackData(n_t, fem.l, S)
    if u_star is None:
        rng = np.random.default_rng(seed)
        u_star = np.zeros((n_t, fem.l))
        for row in u_star:
            row[rng.choice(fem.l, size=S, replace=False)] = 1.0
        u_star = u_star.ravel()
    return PenaltyProblem(op, ks, forward_map(op, u_star)), u_star


@pytest.fixture
def tiny_problem(tiny_fem):
    problem, _ = make_problem(tiny_fem, 3, 1, seed=3)
    return problem
