"""Balanced truncation of the generalized LTI system ``M y' = -K y + M Phi u, y_out = C y``.

Gramians are computed densely: the generalized Lyapunov equations are mapped
to standard ones with the Cholesky factor of ``M`` and handed to a
Bartels-Stewart solver.  That is exact and cheap for the desk-scale meshes
(``N`` up to a few thousand) this package targets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .mesh_fem import FemSystem

log = logging.getLogger(__name__)

FACTOR_RTOL = 1e-12
LYAP_RTOL = 1e-8


class LyapunovError(RuntimeError):
    pass


@dataclass(frozen=True)
class GramianFactors:
    """Low-rank factors ``R R^T = P`` (controllability) and ``L L^T = Q`` (observability)."""

    R: np.ndarray
    L: np.ndarray


@dataclass(frozen=True)
class HankelSpectrum:
    """SVD ``L^T M R = U diag(sigma) V^T`` with ``sigma`` sorted descending."""

    sigma: np.ndarray
    U: np.ndarray
    V: np.ndarray

    def __len__(self):
        return len(self.sigma)


@dataclass(frozen=True)
class ReducedModel:
    r: int
    hankel: np.ndarray
    T1: np.ndarray
    T2: np.ndarray
    M_red: np.ndarray
    K_red: np.ndarray
    Phi_red: np.ndarray
    C_red: np.ndarray

    @property
    def N(self) -> int:
        return self.T2.shape[0]

    def step_matrices(self, delta_t: float):
        """Crank-Nicolson factors ``(M_red + dt/2 K_red, M_red - dt/2 K_red)``."""
        return self.M_red + 0.5 * delta_t * self.K_red, self.M_red - 0.5 * delta_t * self.K_red

    def save(self, path) -> Path:
        """Persist as a compressed ``.npz`` bundle (all arrays plus ``r``)."""
        path = Path(path)
        np.savez_compressed(
            path, r=self.r, hankel=self.hankel, T1=self.T1, T2=self.T2, M_red=self.M_red,
            K_red=self.K_red, Phi_red=self.Phi_red, C_red=self.C_red,
        )
        return path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")

    @classmethod
    def load(cls, path) -> "ReducedModel":
        with np.load(path) as data:
            fields = {k: data[k] for k in data.files}
        fields["r"] = int(fields["r"])
        return cls(**fields)


def _dense(A):
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def _psd_factor(X: np.ndarray, rtol: float = FACTOR_RTOL) -> np.ndarray:
    """``Z`` with ``Z Z^T ~ X`` from the eigenvalues above ``rtol * max``."""
    X = 0.5 * (X + X.T)
    w, V = np.linalg.eigh(X)
    keep = w > rtol * w.max()
    w, V = w[keep][::-1], V[:, keep][:, ::-1]
    return V * np.sqrt(w)


def solve_generalized_lyapunov(M, A, B, transpose: bool = False,
                               rtol: float = FACTOR_RTOL) -> np.ndarray:
    """Factor ``R`` with ``R R^T = X`` solving ``A X M^T + M X A^T + B B^T = 0``.

    With ``transpose=True`` the observability form ``A^T X M + M^T X A + B B^T = 0``
    is solved instead (pass ``B = C^T``).  ``M`` must be symmetric positive
    definite and ``A`` stable (``A = -K`` with ``K`` positive definite).
    """
    M = _dense(M)
    A = _dense(A)
    B = np.atleast_2d(_dense(B))
    if B.shape[0] != M.shape[0]:
        B = B.T
    try:
        Lc = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise LyapunovError("mass matrix is not symmetric positive definite") from exc
    Ahat = sla.solve_triangular(Lc, sla.solve_triangular(Lc, A.T, lower=True).T, lower=True)
    Bhat = sla.solve_triangular(Lc, B, lower=True)
    if transpose:
        Ahat = Ahat.T
    # Bartels-Stewart: Ahat Xhat + Xhat Ahat^T = -Bhat Bhat^T
    Xhat = sla.solve_continuous_lyapunov(Ahat, -Bhat @ Bhat.T)
    # X = Lc^{-T} Xhat Lc^{-1}
    Zhat = _psd_factor(Xhat, rtol)
    R = sla.solve_triangular(Lc.T, Zhat, lower=False)

    X = R @ R.T
    rhs = B @ B.T
    if transpose:
        res = A.T @ X @ M + M.T @ X @ A + rhs
    else:
        res = A @ X @ M.T + M @ X @ A.T + rhs
    rel = np.linalg.norm(res) / np.linalg.norm(rhs)
    if rel > LYAP_RTOL:
        raise LyapunovError(f"Lyapunov residual {rel:.3e} exceeds {LYAP_RTOL:.0e}")
    log.debug("lyapunov: rank %d, relative residual %.2e", R.shape[1], rel)
    return R


def gramian_factors(fem: FemSystem) -> GramianFactors:
    M = fem.M
    A = -fem.K
    R = solve_generalized_lyapunov(M, A, M @ fem.Phi)
    L = solve_generalized_lyapunov(M, A, fem.C.T.toarray(), transpose=True)
    return GramianFactors(R, L)


def hankel_spectrum(L: np.ndarray, M, R: np.ndarray) -> HankelSpectrum:
    """SVD of ``L^T M R``; the singular values are the Hankel singular values."""
    U, s, Vt = np.linalg.svd(L.T @ (M @ R), full_matrices=False)
    return HankelSpectrum(s, U, Vt.T)


def sigma_tail(spectrum, r: int) -> float:
    """``Sigma(r) = sigma_{r+1} + ... + sigma_last``."""
    sigma = spectrum.sigma if isinstance(spectrum, HankelSpectrum) else np.asarray(spectrum)
    if not 0 <= r < len(sigma):
        raise ValueError(f"r={r} outside [0, {len(sigma) - 1}]")
    return float(sigma[r:].sum())


def tail_curve(sigma: np.ndarray) -> np.ndarray:
    """``Sigma(r)`` for ``r = 0 .. len(sigma) - 1``."""
    sigma = np.asarray(sigma, dtype=float)
    return np.cumsum(sigma[::-1])[::-1]


def min_dimension(spectrum, tol: float) -> int:
    """Smallest ``r`` with ``Sigma(r) <= tol`` (``len`` if no truncation is accurate enough)."""
    sigma = spectrum.sigma if isinstance(spectrum, HankelSpectrum) else np.asarray(spectrum)
    curve = tail_curve(sigma)
    hits = np.flatnonzero(curve <= tol)
    return int(hits[0]) if len(hits) else len(sigma)


def admissible_dimension(sigma: np.ndarray, r: int, rtol: float = 1e-10) -> int:
    """Largest ``r' <= r`` with ``sigma_{r'} > sigma_{r'+1}`` (no repeated value is split)."""
    r = min(r, len(sigma))
    while 0 < r < len(sigma) and sigma[r - 1] - sigma[r] <= rtol * sigma[0]:
        r -= 1
    if r == 0:
        raise ValueError("no admissible reduced dimension")
    return r


def truncate(fem: FemSystem, factors: GramianFactors, spectrum: HankelSpectrum,
             r: int) -> ReducedModel:
    """Square-root balanced truncation to dimension ``r``.

    ``r`` is capped at the number of available Hankel values and shrunk, with a
    warning, if it would split a repeated singular value.
    """
    sigma = spectrum.sigma
    r_req = r
    r = admissible_dimension(sigma, r)
    if r != r_req:
        log.warning("reduced dimension %d splits a repeated Hankel value; using %d", r_req, r)
    s = sigma[:r] ** -0.5
    # left projector from the observability factor, right one from the controllability factor
    T1 = s[:, None] * (spectrum.U[:, :r].T @ factors.L.T)
    T2 = (factors.R @ spectrum.V[:, :r]) * s[None, :]
    M = fem.M
    K = fem.K
    return ReducedModel(
        r=r,
        hankel=sigma.copy(),
        T1=T1,
        T2=T2,
        M_red=T1 @ (M @ T2),
        K_red=T1 @ (K @ T2),
        Phi_red=T1 @ (M @ fem.Phi),
        C_red=np.asarray(fem.C @ T2),
    )


def reduce(fem: FemSystem, r: int | None = None, tol: float | None = None,
           factors: GramianFactors | None = None) -> ReducedModel:
    """Balanced truncation to a fixed ``r`` or the smallest ``r`` with ``Sigma(r) <= tol``.

    With neither given, all computed Hankel values are kept ("full rank").
    """
    if r is not None and tol is not None:
        raise ValueError("give either r or tol, not both")
    if factors is None:
        factors = gramian_factors(fem)
    spectrum = hankel_spectrum(factors.L, fem.M, factors.R)
    if r is None and tol is not None:
        r = max(min_dimension(spectrum, tol), 1)
    if r is None:
        r = numerical_rank(spectrum.sigma)
    return truncate(fem, factors, spectrum, r)


def numerical_rank(sigma: np.ndarray, rtol: float = FACTOR_RTOL) -> int:
    sigma = np.asarray(sigma)
    return int(np.count_nonzero(sigma > rtol * sigma[0]))
