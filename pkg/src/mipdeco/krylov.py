"""Restarted GMRES and the block preconditioner for the IPM Newton systems.

The Newton unknowns are ordered ``(dy, du, dz, dp, dq)``.  The same code
handles the full and the reduced system; only the :class:`SpaceTimeOperator`
behind it differs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .spacetime import KnapsackData, SpaceTimeOperator

log = logging.getLogger(__name__)


class LinearOperator:
    """Square matrix-free operator: ``dimension`` plus an ``apply`` callable."""

    def __init__(self, dimension: int, apply: Callable[[np.ndarray], np.ndarray]):
        self.dimension = dimension
        self._apply = apply

    @property
    def shape(self):
        return (self.dimension, self.dimension)

    def apply(self, x):
        return self._apply(x)

    def __matmul__(self, x):
        return self._apply(x)

    @classmethod
    def from_matrix(cls, A) -> "LinearOperator":
        return cls(A.shape[0], lambda x: A @ x)

    @classmethod
    def identity(cls, n: int) -> "LinearOperator":
        return cls(n, lambda x: np.array(x, dtype=float, copy=True))

    def dense(self):
        return np.column_stack([self.apply(e) for e in np.eye(self.dimension)])


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residual_history: list
    converged: bool
    breakdown: bool = False

    @property
    def relative_residual(self) -> float:
        return self.residual_history[-1]


def gmres(A, P_inv=None, b=None, tol: float = 1e-8, max_iter: int = 500, restart: int = 50,
          x0=None) -> GmresResult:
    """Right-preconditioned restarted GMRES.

    Solves ``A P_inv t = b`` and returns ``x = P_inv t``; with right
    preconditioning the minimized residual is the unpreconditioned one, so the
    stopping test ``|b - A x| / |b| <= tol`` needs no extra work.  Reaching
    ``max_iter`` is reported through ``converged=False``, not raised.
    """
    apply_A = A.apply if hasattr(A, "apply") else (lambda v: A @ v)
    if P_inv is None:
        apply_P = lambda v: v  # noqa: E731
    else:
        apply_P = P_inv.apply if hasattr(P_inv, "apply") else (lambda v: P_inv @ v)
    b = np.asarray(b, dtype=float)
    n = b.size
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return GmresResult(np.zeros(n), 0, [0.0], True)

    r = b - apply_A(x) if x0 is not None else b.copy()
    beta = np.linalg.norm(r)
    history = [beta / bnorm]
    its = 0
    breakdown = False
    while history[-1] > tol and its < max_iter:
        m = min(restart, max_iter - its)
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k = 0
        for j in range(m):
            Z[j] = apply_P(V[j])
            w = apply_A(Z[j])
            for i in range(j + 1):  # modified Gram-Schmidt
                H[i, j] = w @ V[i]
                w -= H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            k = j + 1
            its += 1
            if denom == 0.0:
                breakdown = True
                k = j
                break
            cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            hj1 = H[j + 1, j]
            H[j, j] = denom
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            history.append(abs(g[j + 1]) / bnorm)
            if hj1 <= 1e-14 * denom:
                # lucky breakdown: the Krylov space is invariant, solution is exact
                break
            V[j + 1] = w / hj1
            if history[-1] <= tol:
                break
        if k > 0:
            yk = np.linalg.solve(np.triu(H[:k, :k]), g[:k])
            x = x + yk @ Z[:k]
        r = b - apply_A(x)
        beta = np.linalg.norm(r)
        history[-1] = beta / bnorm
        if breakdown or beta == 0.0:
            break
    converged = history[-1] <= tol
    if not converged:
        log.debug("gmres stopped after %d iterations at %.2e", its, history[-1])
    return GmresResult(x, its, history, converged, breakdown)


# ---------------------------------------------------------------------------
# Newton system


def clamp_diagonal(d, gamma: float):
    """Replace non-positive entries by ``gamma`` (keeps the u-block positive definite)."""
    d = np.array(d, dtype=float)
    d[d <= 0] = gamma
    return d


@dataclass
class NewtonOperator:
    """Block operator of the Newton system with rows::

        [ M       0     0      K^T     0   ]
        [ 0       D_u   0     -Phi^T   C^T ]
        [ 0       0     Th_z   0       I   ]
        [ K      -Phi   0      0       0   ]
        [ 0       C     I      0       0   ]

    ``D_u`` is ``-2/eps + Theta_u`` after clamping at ``gamma``.
    """

    op: SpaceTimeOperator
    knapsack: KnapsackData
    D_u: np.ndarray
    Theta_z: np.ndarray

    @property
    def sizes(self):
        ny = self.op.n_t * self.op.n
        nu = self.op.n_t * self.op.l
        nt = self.op.n_t
        return (ny, nu, nt, ny, nt)

    @property
    def dimension(self) -> int:
        return sum(self.sizes)

    def split(self, x):
        x = np.asarray(x, dtype=float)
        ny, nu, nt = self.op.n_t * self.op.n, self.op.n_t * self.op.l, self.op.n_t
        a, b, c = ny, ny + nu, ny + nu + nt
        return x[:a], x[a:b], x[b:c], x[c:c + ny], x[c + ny:]

    def apply(self, x):
        op, ks = self.op, self.knapsack
        dy, du, dz, dp, dq = self.split(x)
        return np.concatenate([
            op.apply_M(dy) + op.apply_KT(dp),
            self.D_u * du - op.apply_PhiT(dp) + ks.apply_T(dq),
            self.Theta_z * dz + dq,
            op.apply_K(dy) - op.apply_Phi(du),
            ks.apply(du) + dz,
        ])

    def dense(self):
        op, ks = self.op, self.knapsack
        ny, nu, nt, _, _ = self.sizes
        Kt, Pt, Mt, Ci = op.dense_K(), op.dense_Phi(), op.dense_M(), ks.dense()
        Z = np.zeros
        return np.block([
            [Mt, Z((ny, nu)), Z((ny, nt)), Kt.T, Z((ny, nt))],
            [Z((nu, ny)), np.diag(self.D_u), Z((nu, nt)), -Pt.T, Ci.T],
            [Z((nt, ny)), Z((nt, nu)), np.diag(self.Theta_z), Z((nt, ny)), np.eye(nt)],
            [Kt, -Pt, Z((ny, nt)), Z((ny, ny)), Z((ny, nt))],
            [Z((nt, ny)), Ci, np.eye(nt), Z((nt, ny)), Z((nt, nt))],
        ])


    def sparse(self) -> sp.csc_matrix:
        """The Newton matrix in sparse form (for the direct fallback)."""
        op, ks = self.op, self.knapsack
        Kt, Pt, Mt = op.sparse_K(), op.sparse_Phi(), op.sparse_M()
        Ci = sp.csr_matrix(ks.dense())
        nt = self.sizes[2]
        I = sp.eye(nt)
        return sp.bmat([
            [Mt, None, None, Kt.T, None],
            [None, sp.diags(self.D_u), None, -Pt.T, Ci.T],
            [None, None, sp.diags(self.Theta_z), None, I],
            [Kt, -Pt, None, None, None],
            [None, Ci, I, None, None],
        ], format="csc")


class PreconditionerError(RuntimeError):
    pass


@dataclass
class SaddlePreconditioner:
    """Inverse of the block preconditioner built from the permuted saddle-point form.

    The (1,1) block is replaced by its block-triangular part and the Schur
    complement by the block-diagonal approximation
    ``diag(K^T, Theta_z^{-1} + C D_u^{-1} C^T)``.  One application costs one
    forward and one backward substitution with ``K``.
    """

    newton: NewtonOperator
    D_inv: np.ndarray = field(init=False)
    Theta_z_inv: np.ndarray = field(init=False)
    schur: np.ndarray = field(init=False)
    n_applies: int = field(default=0, init=False)

    def __post_init__(self):
        nw = self.newton
        self.D_inv = 1.0 / nw.D_u
        self.Theta_z_inv = 1.0 / nw.Theta_z
        self.schur = self.Theta_z_inv + nw.knapsack.apply(self.D_inv)
        if not np.all(np.isfinite(self.schur)) or np.any(self.schur <= 0):
            raise PreconditionerError("Schur diagonal is not positive; was D_u clamped?")

    @property
    def dimension(self) -> int:
        return self.newton.dimension

    def apply(self, w):
        nw = self.newton
        op, ks = nw.op, nw.knapsack
        w1, w2, w3, w4, w5 = nw.split(w)
        v1 = op.solve_K(w4)
        v2 = self.D_inv * w2
        v3 = self.Theta_z_inv * w3
        v4 = op.solve_KT(-w1 + op.apply_M(v1))
        v5 = (ks.apply(v2) + w5) / self.schur
        self.n_applies += 1
        return np.concatenate([v1, v2, v3, v4, v5])

    def dense_forward(self):
        """The matrix ``P`` with ``apply(P v) = v`` (tests only)."""
        nw = self.newton
        op, ks = nw.op, nw.knapsack
        ny, nu, nt, _, _ = nw.sizes
        Kt, Mt, Ci = op.dense_K(), op.dense_M(), ks.dense()
        Z = np.zeros
        return np.block([
            [Mt, Z((ny, nu)), Z((ny, nt)), -Kt.T, Z((ny, nt))],
            [Z((nu, ny)), np.diag(nw.D_u), Z((nu, nt)), Z((nu, ny)), Z((nu, nt))],
            [Z((nt, ny)), Z((nt, nu)), np.diag(nw.Theta_z), Z((nt, ny)), Z((nt, nt))],
            [Kt, Z((ny, nu)), Z((ny, nt)), Z((ny, ny)), Z((ny, nt))],
            [Z((nt, ny)), -Ci, Z((nt, nt)), Z((nt, ny)), np.diag(self.schur)],
        ])


def build_preconditioner(newton: NewtonOperator) -> SaddlePreconditioner:
    return SaddlePreconditioner(newton)


def apply_preconditioner_inverse(prec: SaddlePreconditioner, w):
    return prec.apply(w)
