import numpy as np
import pytest
import scipy.sparse.linalg as spla

from mipdeco.ipm import interiorize, newton_system
from mipdeco.krylov import (
    LinearOperator, NewtonOperator, PreconditionerError, build_preconditioner, clamp_diagonal, gmres,
)
from mipdeco.spacetime import KnapsackData, TimeGrid, build_spacetime

from oracles import kron_oracle


def nonsymmetric_matrix(n, seed=0):
    rng = np.random.default_rng(seed)
    return np.eye(n) * 4 + rng.standard_normal((n, n)) / np.sqrt(n)


def test_gmres_matches_direct_solve():
    A = nonsymmetric_matrix(60)
    b = np.random.default_rng(1).standard_normal(60)
    res = gmres(A, b=b, tol=1e-12)
    assert res.converged
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-10)
    np.testing.assert_allclose(np.linalg.norm(b - A @ res.x) / np.linalg.norm(b), res.relative_residual,
                               rtol=1e-6, atol=1e-15)


def test_gmres_agrees_with_scipy():
    A = nonsymmetric_matrix(40, seed=2)
    b = np.ones(40)
    ours = gmres(LinearOperator.from_matrix(A), b=b, tol=1e-10, restart=10)
    ref, info = spla.gmres(A, b, rtol=1e-12, restart=40)
    assert info == 0 and ours.converged
    np.testing.assert_allclose(ours.x, ref, atol=1e-8)


def test_gmres_exact_preconditioner_one_iteration():
    A = nonsymmetric_matrix(30)
    b = np.arange(30.0)
    res = gmres(A, np.linalg.inv(A), b, tol=1e-10)
    assert res.iterations == 1
    np.testing.assert_allclose(A @ res.x, b, atol=1e-8)


def test_gmres_residual_history_nonincreasing():
    A = nonsymmetric_matrix(80, seed=3)
    res = gmres(A, b=np.ones(80), tol=1e-12, restart=7)
    h = np.array(res.residual_history)
    assert np.all(np.diff(h) <= 1e-12)


def test_gmres_cap_reported_not_raised():
    A = np.diag(np.linspace(1, 1e4, 200))
    res = gmres(A, b=np.ones(200), tol=1e-14, max_iter=5, restart=5)
    assert not res.converged and res.iterations == 5


def test_gmres_zero_rhs():
    res = gmres(np.eye(3), b=np.zeros(3))
    assert res.converged and res.iterations == 0 and np.all(res.x == 0)


def test_clamp_diagonal():
    np.testing.assert_array_equal(clamp_diagonal([-1.0, 0.0, 2.0], 1e-6), [1e-6, 1e-6, 2.0])


@pytest.fixture(scope="module")
def newton_small(fem_quarter):
    tg = TimeGrid(3)
    op = build_spacetime(fem_quarter, tg)
    ks = KnapsackData(3, fem_quarter.l, 1)
    rng = np.random.default_rng(4)
    D_u = rng.uniform(0.1, 10, 3 * fem_quarter.l)
    Th = rng.uniform(0.1, 10, 3)
    return NewtonOperator(op, ks, D_u, Th), fem_quarter, tg


def preconditioner_oracle(fem, tg, ks, D_u, Th):
    """Forward block matrix whose inverse is applied by the preconditioner."""
    Kt, _, Mt = kron_oracle(fem.M, fem.K, np.asarray(fem.M @ fem.Phi), fem.obs_mass, tg.n_t, tg.delta_t)
    Ci = ks.dense()
    schur = np.diag(Ci @ np.diag(1 / D_u) @ Ci.T) + 1 / Th
    ny, nu, nt = Kt.shape[0], len(D_u), len(Th)
    P = np.zeros((2 * ny + nu + 2 * nt,) * 2)
    oy, ou, oz, op_, oq = 0, ny, ny + nu, ny + nu + nt, 2 * ny + nu + nt
    P[oy:ou, oy:ou] = Mt
    P[oy:ou, op_:oq] = -Kt.T
    P[ou:oz, ou:oz] = np.diag(D_u)
    P[oz:op_, oz:op_] = np.diag(Th)
    P[op_:oq, oy:ou] = Kt
    P[oq:, ou:oz] = -Ci
    P[oq:, oq:] = np.diag(schur)
    return P


def test_preconditioner_inverse_consistency(newton_small):
    N, fem, tg = newton_small
    prec = build_preconditioner(N)
    P = preconditioner_oracle(fem, tg, N.knapsack, N.D_u, N.Theta_z)
    np.testing.assert_allclose(prec.dense_forward(), P, atol=1e-12)
    rng = np.random.default_rng(5)
    for _ in range(5):
        v = rng.standard_normal(N.dimension)
        assert np.abs(prec.apply(P @ v) - v).max() <= 1e-8 * max(1, np.abs(v).max())


def test_schur_diagonal_matches_dense_product(newton_small):
    N, _, _ = newton_small
    prec = build_preconditioner(N)
    Ci = N.knapsack.dense()
    dense = Ci @ np.diag(1 / N.D_u) @ Ci.T + np.diag(1 / N.Theta_z)
    # one knapsack row per time step: the product is exactly diagonal
    np.testing.assert_allclose(dense, np.diag(np.diag(dense)), atol=0)
    np.testing.assert_allclose(prec.schur, np.diag(dense), rtol=1e-14)


def test_nonpositive_schur_rejected(newton_small):
    N, _, _ = newton_small
    bad = NewtonOperator(N.op, N.knapsack, -np.ones_like(N.D_u), N.Theta_z)
    with pytest.raises(PreconditionerError):
        build_preconditioner(bad)


def test_preconditioner_reduces_iterations(tiny_problem):
    it = interiorize(np.full(tiny_problem.knapsack.n_t * tiny_problem.knapsack.l, 0.3),
                     tiny_problem.knapsack, tiny_problem.spacetime)
    newton, rhs = newton_system(it, tiny_problem, mu=1e-2, epsilon=1.0, gamma=1e-6)
    pre = gmres(newton, build_preconditioner(newton), rhs, tol=1e-8, max_iter=2000, restart=50)
    plain = gmres(newton, None, rhs, tol=1e-8, max_iter=2000, restart=50)
    assert pre.converged
    assert pre.iterations <= 0.5 * plain.iterations
    np.testing.assert_allclose(newton.apply(pre.x), rhs, atol=1e-6 * np.linalg.norm(rhs))


def test_sparse_newton_matrix_matches_dense(tiny_problem):
    ks = tiny_problem.knapsack
    rng = np.random.default_rng(5)
    N = NewtonOperator(tiny_problem.spacetime, ks, rng.uniform(0.5, 2, ks.n_t * ks.l), rng.uniform(0.5, 2, ks.n_t))
    np.testing.assert_allclose(N.sparse().toarray(), N.dense(), atol=1e-14)
