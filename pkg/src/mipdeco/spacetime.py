"""All-at-once Crank-Nicolson operators and the penalized tracking objective.

Space-time vectors are flat and block-major: ``y = (y_1, ..., y_{n_t})`` with
time as the outer index.  The scheme's ``y_0`` and ``u_0`` are fixed to zero,
so the operators act on ``n_t`` unknown blocks::

    (K y)_i   = K1 y_i - K2 y_{i-1}
    (Phi u)_i = dt/2 * B (u_i + u_{i-1})

with ``K1 = M + dt/2 K``, ``K2 = M - dt/2 K`` and ``B = M Phi``.  The step is
``dt = T / (n_t - 1)``; note that with this convention the last block sits at
``t = n_t dt``, one step past ``T``.

The same class serves the reduced model: there ``K1``, ``K2``, ``B`` are the
dense reduced factors and ``T2`` reconstructs full states (``C_hat = I (x) T2``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh_fem import FemSystem


class FactorizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    n_t: int
    T: float = 1.0

    def __post_init__(self):
        if self.n_t < 2:
            raise ValueError("need at least two time points")
        if self.T <= 0:
            raise ValueError("final time must be positive")

    @property
    def delta_t(self) -> float:
        return self.T / (self.n_t - 1)


class _Solver:
    """LU of ``K1``; sparse (SuperLU) or dense (LAPACK getrf)."""

    def __init__(self, A):
        self.sparse = sp.issparse(A)
        try:
            if self.sparse:
                self._lu = spla.splu(A.tocsc())
            else:
                self._lu = sla.lu_factor(A, check_finite=True)
        except (RuntimeError, ValueError, np.linalg.LinAlgError) as exc:
            raise FactorizationError(f"factorization of K1 failed: {exc}") from exc
        if not self.sparse and np.any(np.abs(np.diag(self._lu[0])) == 0):
            raise FactorizationError("K1 is singular")

    def solve(self, b, trans=False):
        if self.sparse:
            return self._lu.solve(b, trans="T" if trans else "N")
        return sla.lu_solve(self._lu, b, trans=1 if trans else 0, check_finite=False)


@dataclass
class SpaceTimeOperator:
    """Kronecker-factored ``K_tilde``, ``Phi_tilde`` and ``M_tilde`` with matrix-free applies.

    ``obs`` is the spatial block of ``M_tilde`` in state coordinates (``C^T M_obs C``
    for the full model, ``T2^T C^T M_obs C T2`` for the reduced one) and
    ``obs_full`` always lives on the full mesh, for objectives on reconstructed
    states.
    """

    K1: object
    K2: object
    B: np.ndarray
    obs: object
    obs_full: sp.csr_matrix
    time: TimeGrid
    T2: np.ndarray | None = None
    n_solves: int = field(default=0, init=False)

    def __post_init__(self):
        self._solver = _Solver(self.K1)
        self._K1T = self.K1.T.tocsr() if sp.issparse(self.K1) else np.ascontiguousarray(self.K1.T)
        self._K2T = self.K2.T.tocsr() if sp.issparse(self.K2) else np.ascontiguousarray(self.K2.T)

    # sizes ---------------------------------------------------------------
    @property
    def n_t(self) -> int:
        return self.time.n_t

    @property
    def delta_t(self) -> float:
        return self.time.delta_t

    @property
    def n(self) -> int:
        """State dimension per time block (``N`` or ``r``)."""
        return self.K1.shape[0]

    @property
    def N_full(self) -> int:
        return self.obs_full.shape[0]

    @property
    def l(self) -> int:
        return self.B.shape[1]

    @property
    def reduced(self) -> bool:
        return self.T2 is not None

    def _blocks(self, v, width):
        v = np.asarray(v, dtype=float)
        if v.size != self.n_t * width:
            raise ValueError(f"expected a vector of length {self.n_t * width}, got {v.size}")
        return v.reshape(self.n_t, width)

    # applies -------------------------------------------------------------
    def apply_K(self, y):
        Y = self._blocks(y, self.n)
        out = (self.K1 @ Y.T).T
        out[1:] -= (self.K2 @ Y[:-1].T).T
        return out.ravel()

    def apply_KT(self, p):
        P = self._blocks(p, self.n)
        out = (self._K1T @ P.T).T
        out[:-1] -= (self._K2T @ P[1:].T).T
        return out.ravel()

    def apply_Phi(self, u):
        U = self._blocks(u, self.l)
        S = U.copy()
        S[1:] += U[:-1]
        return (0.5 * self.delta_t * (self.B @ S.T).T).ravel()

    def apply_PhiT(self, v):
        V = self._blocks(v, self.n)
        W = (self.B.T @ V.T).T
        W[:-1] += W[1:].copy()
        return (0.5 * self.delta_t * W).ravel()

    def apply_M(self, y):
        Y = self._blocks(y, self.n)
        return np.asarray((self.obs @ Y.T).T).ravel()

    def apply_M_full(self, y):
        Y = self._blocks(y, self.N_full)
        return np.asarray((self.obs_full @ Y.T).T).ravel()

    def reconstruct(self, y):
        """``C_hat y``: full-mesh states (identity for the full model)."""
        if self.T2 is None:
            return np.asarray(y, dtype=float).copy()
        Y = self._blocks(y, self.n)
        return (self.T2 @ Y.T).T.ravel()

    def restrict(self, v):
        """``C_hat^T v`` for a full-mesh space-time vector ``v``."""
        if self.T2 is None:
            return np.asarray(v, dtype=float).copy()
        V = self._blocks(v, self.N_full)
        return (self.T2.T @ V.T).T.ravel()

    # block-triangular solves -------------------------------------------------
    def solve_K(self, rhs):
        """Forward substitution for ``K_tilde y = rhs`` (one ``K1`` solve per block)."""
        R = self._blocks(rhs, self.n)
        Y = np.empty_like(R)
        prev = np.zeros(self.n)
        for i in range(self.n_t):
            prev = self._solver.solve(R[i] + self.K2 @ prev)
            Y[i] = prev
        self.n_solves += 1
        return Y.ravel()

    def solve_KT(self, rhs):
        """Backward substitution for ``K_tilde^T p = rhs``."""
        R = self._blocks(rhs, self.n)
        P = np.empty_like(R)
        nxt = np.zeros(self.n)
        for i in range(self.n_t - 1, -1, -1):
            nxt = self._solver.solve(R[i] + self._K2T @ nxt, trans=True)
            P[i] = nxt
        self.n_solves += 1
        return P.ravel()

    # dense materialization (tests and tiny problems only) ---------------------
    def dense_K(self):
        I1 = np.eye(self.n_t)
        I2 = np.eye(self.n_t, k=-1)
        return np.kron(I1, _arr(self.K1)) - np.kron(I2, _arr(self.K2))

    def dense_Phi(self):
        I1 = np.eye(self.n_t)
        I2 = np.eye(self.n_t, k=-1)
        return 0.5 * self.delta_t * (np.kron(I1, self.B) + np.kron(I2, self.B))

    def dense_M(self):
        return np.kron(np.eye(self.n_t), _arr(self.obs))

    # sparse materialization (direct fallback solves) --------------------------
    def sparse_K(self):
        I1, I2 = sp.eye(self.n_t), sp.eye(self.n_t, k=-1)
        return (sp.kron(I1, sp.csr_matrix(self.K1)) - sp.kron(I2, sp.csr_matrix(self.K2))).tocsr()

    def sparse_Phi(self):
        I1, I2 = sp.eye(self.n_t), sp.eye(self.n_t, k=-1)
        B = sp.csr_matrix(self.B)
        return (0.5 * self.delta_t * (sp.kron(I1, B) + sp.kron(I2, B))).tocsr()

    def sparse_M(self):
        return sp.kron(sp.eye(self.n_t), sp.csr_matrix(self.obs)).tocsr()


def _arr(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A)


def build_spacetime(fem: FemSystem, tg: TimeGrid) -> SpaceTimeOperator:
    dt = tg.delta_t
    K1 = (fem.M + 0.5 * dt * fem.K).tocsr()
    K2 = (fem.M - 0.5 * dt * fem.K).tocsr()
    obs = fem.obs_mass
    return SpaceTimeOperator(K1=K1, K2=K2, B=np.asarray(fem.M @ fem.Phi), obs=obs,
                             obs_full=obs, time=tg)


def build_reduced_spacetime(red, fem: FemSystem, tg: TimeGrid) -> SpaceTimeOperator:
    """Reduced all-at-once operators from a :class:`~mipdeco.balanced_truncation.ReducedModel`."""
    K1, K2 = red.step_matrices(tg.delta_t)
    obs_full = fem.obs_mass
    obs = red.T2.T @ (obs_full @ red.T2)
    return SpaceTimeOperator(K1=K1, K2=K2, B=np.asarray(red.Phi_red), obs=0.5 * (obs + obs.T),
                             obs_full=obs_full, time=tg, T2=np.asarray(red.T2))


def solve_ktilde(op: SpaceTimeOperator, rhs):
    return op.solve_K(rhs)


def solve_ktilde_transpose(op: SpaceTimeOperator, rhs):
    return op.solve_KT(rhs)


def forward_map(op: SpaceTimeOperator, u):
    """``f(u) = K_tilde^{-1} Phi_tilde u`` in the operator's own state coordinates."""
    return op.solve_K(op.apply_Phi(u))


def forward_map_full(op: SpaceTimeOperator, u):
    """Full-mesh state of ``u``: ``f(u)`` or the reconstruction ``f_red(u)``."""
    return op.reconstruct(forward_map(op, u))


# ---------------------------------------------------------------------------
# knapsack constraint and objective


@dataclass(frozen=True)
class KnapsackData:
    """Per-time-step budget ``sum_j (u_i)_j <= S``."""

    n_t: int
    l: int
    S: float

    @property
    def S_vec(self):
        return np.full(self.n_t, float(self.S))

    def apply(self, u):
        return np.asarray(u, dtype=float).reshape(self.n_t, self.l).sum(axis=1)

    def apply_T(self, q):
        return np.repeat(np.asarray(q, dtype=float), self.l)

    def dense(self):
        return np.kron(np.eye(self.n_t), np.ones((1, self.l)))


def knapsack_check(knapsack: KnapsackData, u, tol: float = 1e-9) -> bool:
    return bool(np.all(knapsack.apply(u) <= knapsack.S + tol))


@dataclass
class PenaltyProblem:
    """Data of the penalty formulation; ``epsilon = inf`` switches the penalty off."""

    spacetime: SpaceTimeOperator
    knapsack: KnapsackData
    y_d: np.ndarray
    epsilon: float = math.inf

    def __post_init__(self):
        self.y_d = np.asarray(self.y_d, dtype=float)
        if self.y_d.size != self.spacetime.n_t * self.spacetime.N_full:
            raise ValueError("desired state has the wrong length")
        if not self.epsilon > 0:
            raise ValueError("penalty parameter must be positive")

    def with_operator(self, op: SpaceTimeOperator) -> "PenaltyProblem":
        return PenaltyProblem(op, self.knapsack, self.y_d, self.epsilon)

    def state(self, u):
        """Full-mesh state of the control under this problem's forward map."""
        return forward_map_full(self.spacetime, u)


def tracking(problem: PenaltyProblem, y) -> float:
    """``1/2 (y - y_d)^T M_tilde (y - y_d)`` for a full-mesh state ``y``."""
    e = np.asarray(y) - problem.y_d
    return 0.5 * float(e @ problem.spacetime.apply_M_full(e))


def penalty_term(u, epsilon: float) -> float:
    if math.isinf(epsilon):
        return 0.0
    u = np.asarray(u, dtype=float)
    return float(np.sum(u * (1.0 - u)) / epsilon)


def objective(problem: PenaltyProblem, y, u, epsilon: float | None = None) -> float:
    """Penalized tracking objective ``J(x; eps)`` at a full-mesh state ``y``."""
    eps = problem.epsilon if epsilon is None else epsilon
    return tracking(problem, y) + penalty_term(u, eps)


def save_vector_csv(path, v, n_t: int) -> None:
    """One row per time block (time outer, space inner)."""
    v = np.asarray(v, dtype=float).reshape(n_t, -1)
    np.savetxt(path, v, delimiter=",", fmt="%.17g")


def load_vector_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",")).ravel()
