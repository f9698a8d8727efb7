import math

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from mipdeco.balanced_truncation import reduce
from mipdeco.krylov import NewtonOperator
from mipdeco.spacetime import (
    KnapsackData, PenaltyProblem, TimeGrid, build_reduced_spacetime, build_spacetime, forward_map,
    forward_map_full, knapsack_check, load_vector_csv, objective, penalty_term, save_vector_csv,
    tracking,
)

from oracles import kron_oracle, newton_oracle


def apply_columns(apply, n):
    return np.column_stack([apply(e) for e in np.eye(n)])


@pytest.fixture(scope="module")
def small(fem_quarter):
    tg = TimeGrid(2)
    op = build_spacetime(fem_quarter, tg)
    return fem_quarter, tg, op


def test_timegrid():
    assert TimeGrid(11).delta_t == pytest.approx(0.1)
    with pytest.raises(ValueError):
        TimeGrid(1)
    with pytest.raises(ValueError):
        TimeGrid(5, T=0.0)


@pytest.mark.parametrize("n_t", [2, 3])
def test_dense_matches_kron_oracle_and_matrix_free(fem_quarter, n_t):
    tg = TimeGrid(n_t)
    op = build_spacetime(fem_quarter, tg)
    Kt, Pt, Mt = kron_oracle(fem_quarter.M, fem_quarter.K, np.asarray(fem_quarter.M @ fem_quarter.Phi),
                             fem_quarter.obs_mass, n_t, tg.delta_t)
    ny, nu = Kt.shape[0], Pt.shape[1]
    for dense, oracle, apply, n in ((op.dense_K(), Kt, op.apply_K, ny), (op.dense_Phi(), Pt, op.apply_Phi, nu),
                                   (op.dense_M(), Mt, op.apply_M, ny)):
        assert np.abs(dense - oracle).max() <= 1e-10
        assert np.abs(apply_columns(apply, n) - oracle).max() <= 1e-10
    assert np.abs(apply_columns(op.apply_KT, ny) - Kt.T).max() <= 1e-10
    assert np.abs(apply_columns(op.apply_PhiT, ny) - Pt.T).max() <= 1e-10


def test_newton_operator_matches_dense(small):
    fem, tg, op = small
    ks = KnapsackData(tg.n_t, fem.l, 1)
    rng = np.random.default_rng(0)
    D_u = rng.uniform(0.5, 2, tg.n_t * fem.l)
    Th = rng.uniform(0.5, 2, tg.n_t)
    N = NewtonOperator(op, ks, D_u, Th)
    Kt, Pt, Mt = kron_oracle(fem.M, fem.K, np.asarray(fem.M @ fem.Phi), fem.obs_mass, tg.n_t, tg.delta_t)
    oracle = newton_oracle(Kt, Pt, Mt, ks.dense(), D_u, Th)
    assert np.abs(apply_columns(N.apply, N.dimension) - oracle).max() <= 1e-10
    assert np.abs(N.dense() - oracle).max() <= 1e-10


def test_reduced_newton_operator_matches_dense(small):
    fem, tg, _ = small
    red = reduce(fem, r=4)
    opr = build_reduced_spacetime(red, fem, tg)
    ks = KnapsackData(tg.n_t, fem.l, 1)
    D_u = np.linspace(1, 2, tg.n_t * fem.l)
    Th = np.array([3.0, 4.0])
    N = NewtonOperator(opr, ks, D_u, Th)
    obs = red.T2.T @ fem.obs_mass.toarray() @ red.T2
    Kt, Pt, Mt = kron_oracle(red.M_red, red.K_red, red.Phi_red, obs, tg.n_t, tg.delta_t)
    oracle = newton_oracle(Kt, Pt, Mt, ks.dense(), D_u, Th)
    assert np.abs(apply_columns(N.apply, N.dimension) - oracle).max() <= 1e-10


def test_block_solves_invert(fem_desk):
    op = build_spacetime(fem_desk, TimeGrid(5))
    rng = np.random.default_rng(1)
    y = rng.standard_normal(5 * fem_desk.N)
    np.testing.assert_allclose(op.solve_K(op.apply_K(y)), y, atol=1e-10)
    np.testing.assert_allclose(op.solve_KT(op.apply_KT(y)), y, atol=1e-10)


def test_forward_map_matches_time_stepping(fem_desk):
    n_t = 6
    tg = TimeGrid(n_t)
    op = build_spacetime(fem_desk, tg)
    rng = np.random.default_rng(2)
    u = rng.uniform(0, 1, n_t * fem_desk.l)
    U = u.reshape(n_t, -1)
    dt = tg.delta_t
    A = (fem_desk.M + dt / 2 * fem_desk.K).tocsc()
    Bm = (fem_desk.M - dt / 2 * fem_desk.K)
    B = fem_desk.M @ fem_desk.Phi
    y, u_prev, states = np.zeros(fem_desk.N), np.zeros(fem_desk.l), []
    for i in range(n_t):
        y = spla.spsolve(A, Bm @ y + dt / 2 * B @ (U[i] + u_prev))
        u_prev = U[i]
        states.append(y)
    np.testing.assert_allclose(forward_map(op, u), np.concatenate(states), rtol=1e-10, atol=1e-12)


def test_forward_map_zero_and_linear(fem_quarter):
    op = build_spacetime(fem_quarter, TimeGrid(3))
    n = 3 * fem_quarter.l
    assert np.all(forward_map(op, np.zeros(n)) == 0)
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=n), rng.uniform(size=n)
    np.testing.assert_allclose(forward_map(op, 2 * a - b), 2 * forward_map(op, a) - forward_map(op, b),
                               atol=1e-12)


def test_crank_nicolson_second_order(fem_quarter):
    M, K = fem_quarter.M.toarray(), fem_quarter.K.toarray()
    B = fem_quarter.M @ fem_quarter.Phi
    lam, V = sla.eigh(K, M)
    c = np.array([1.0, 0.5, 0.2, 0.8])
    b = V.T @ B @ c

    def exact(t):  # modal solution of M y' + K y = B c sin(pi t), y(0) = 0
        return V @ (b * (lam * np.sin(np.pi * t) - np.pi * np.cos(np.pi * t) + np.pi * np.exp(-lam * t))
                    / (lam**2 + np.pi**2))

    errs = []
    for k in (32, 64, 128):
        tg = TimeGrid(k + 1)
        t = np.arange(1, k + 2) * tg.delta_t
        u = np.outer(np.sin(np.pi * t), c).ravel()
        Y = forward_map(build_spacetime(fem_quarter, tg), u).reshape(k + 1, -1)
        i = k // 2 - 1  # t = 1/2
        errs.append(np.linalg.norm(Y[i] - exact(t[i])))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 2.0) <= 0.1), orders


def test_objective_examples(fem_quarter):
    op = build_spacetime(fem_quarter, TimeGrid(2))
    ks = KnapsackData(2, fem_quarter.l, 1)
    y_d = np.random.default_rng(0).standard_normal(2 * fem_quarter.N)
    prob = PenaltyProblem(op, ks, y_d)
    u = np.full(2 * fem_quarter.l, 0.5)
    assert objective(prob, y_d, u, 1.0) == pytest.approx(2 * fem_quarter.l / 4)
    assert objective(prob, y_d, u, math.inf) == 0.0
    assert penalty_term(np.array([0.0, 1.0]), 1e-3) == 0.0
    y = y_d + 1.0
    assert tracking(prob, y) == pytest.approx(0.5 * 2 * fem_quarter.M_obs.sum())


def test_problem_validation(fem_quarter):
    op = build_spacetime(fem_quarter, TimeGrid(2))
    ks = KnapsackData(2, fem_quarter.l, 1)
    with pytest.raises(ValueError):
        PenaltyProblem(op, ks, np.zeros(3))
    with pytest.raises(ValueError):
        PenaltyProblem(op, ks, np.zeros(2 * fem_quarter.N), epsilon=0.0)


def test_knapsack_data():
    ks = KnapsackData(2, 3, 2)
    u = np.array([1, 1, 0, 0.5, 0.5, 0.5])
    np.testing.assert_allclose(ks.apply(u), [2, 1.5])
    np.testing.assert_allclose(ks.dense() @ u, ks.apply(u))
    np.testing.assert_allclose(ks.apply_T([1, 2]), ks.dense().T @ [1, 2])
    assert knapsack_check(ks, u)
    assert not knapsack_check(ks, np.ones(6))


def test_reduced_forward_map_full_rank(fem_quarter):
    tg = TimeGrid(3)
    op = build_spacetime(fem_quarter, tg)
    red = reduce(fem_quarter)
    opr = build_reduced_spacetime(red, fem_quarter, tg)
    u = np.random.default_rng(4).uniform(size=3 * fem_quarter.l)
    C = sp.kron(sp.eye(3), fem_quarter.C)
    full, rec = C @ forward_map_full(op, u), C @ forward_map_full(opr, u)
    assert np.linalg.norm(full - rec) <= 1e-6 * np.linalg.norm(full)
    assert np.all(forward_map(opr, np.zeros_like(u)) == 0)


def test_vector_csv_round_trip(tmp_path):
    v = np.random.default_rng(5).standard_normal(12)
    save_vector_csv(tmp_path / "v.csv", v, 3)
    rows = (tmp_path / "v.csv").read_text().strip().splitlines()
    assert len(rows) == 3 and len(rows[0].split(",")) == 4
    np.testing.assert_array_equal(load_vector_csv(tmp_path / "v.csv"), v)
