"""Interior point method for the penalty problem (full and reduced variants).

The two variants share every line of code; they differ only in the
:class:`~mipdeco.spacetime.SpaceTimeOperator` stored in the problem (full
Crank-Nicolson factors or the balanced-truncation ones).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .krylov import NewtonOperator, build_preconditioner, clamp_diagonal, gmres
from .spacetime import KnapsackData, PenaltyProblem, forward_map, objective

log = logging.getLogger(__name__)

FULL = "full"
REDUCED = "reduced"


class IpmError(RuntimeError):
    pass


@dataclass(frozen=True)
class IpmSettings:
    mu0: float = 1.0
    mu_factor: float = 0.1
    kkt_tol: float = 1e-6
    mu_floor: float = 1e-15
    gamma: float = 1e-6
    eta_rule: str = "inexact_full"
    step_fraction: float = 0.995
    gmres_restart: int = 50
    gmres_max_iter: int = 500
    max_gmres_failures: int = 3
    keep_residual_history: bool = False
    step_rule: str = "common"
    predictor_corrector: bool = True
    direct_fallback: bool = True
    max_iter: int = 100

    def __post_init__(self):
        for name in ("mu0", "mu_factor", "kkt_tol", "mu_floor", "gamma", "step_fraction"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.step_fraction < 1 or not self.mu_factor < 1:
            raise ValueError("step_fraction and mu_factor must be < 1")
        if self.eta_rule not in ("inexact_full", "fixed_1e-10"):
            raise ValueError(f"unknown eta rule {self.eta_rule!r}")
        if self.step_rule not in ("common", "separate"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")


@dataclass
class IpmIterate:
    y: np.ndarray
    u: np.ndarray
    z: np.ndarray
    p: np.ndarray
    q: np.ndarray
    lam_u0: np.ndarray
    lam_u1: np.ndarray
    lam_z0: np.ndarray

    def copy(self) -> "IpmIterate":
        return IpmIterate(*(np.array(getattr(self, f)) for f in self.__dataclass_fields__))

    def is_interior(self) -> bool:
        return bool(
            np.all(self.u > 0) and np.all(self.u < 1) and np.all(self.z > 0)
            and np.all(self.lam_u0 > 0) and np.all(self.lam_u1 > 0) and np.all(self.lam_z0 > 0)
        )


@dataclass
class IpmReport:
    nli: int = 0
    gmres_iterations: list = field(default_factory=list)
    residuals: tuple = (math.inf, math.inf, math.inf)
    objective: float = math.nan
    wall_time: float = 0.0
    converged: bool = False
    mu_floor_reached: bool = False
    gmres_stalled: bool = False
    max_iter_reached: bool = False
    gmres_failures: int = 0
    direct_solves: int = 0
    history: list = field(default_factory=list)
    residual_histories: list = field(default_factory=list)

    @property
    def agmres(self) -> float:
        return float(np.mean(self.gmres_iterations)) if self.gmres_iterations else 0.0


def eta_for_mu(mu: float, variant: str = FULL) -> float:
    """GMRES tolerance: ``max(min(1e-4, mu), 1e-10)`` for the full IPM, ``1e-10`` for the reduced one."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    if variant == REDUCED:
        return 1e-10
    return max(min(1e-4, mu), 1e-10)


def interiorize(u_guess, knapsack: KnapsackData, op=None, mu0: float = 1.0) -> IpmIterate:
    """Strictly interior starting point around ``u_guess``.

    ``u`` is clipped to ``[0.01, 0.99]``, the slack floored at ``0.1``, the
    state set by the forward map (zero if no operator is given) and the bound
    multipliers put on the central path for ``mu0``.
    """
    u = np.clip(np.asarray(u_guess, dtype=float), 0.01, 0.99)
    z = np.maximum(knapsack.S_vec - knapsack.apply(u), 0.1)
    if op is not None:
        y = forward_map(op, u)
        n = y.size
    else:
        y = np.zeros(0)
        n = 0
    return IpmIterate(
        y=y, u=u, z=z, p=np.zeros(n), q=np.zeros(knapsack.n_t),
        lam_u0=mu0 / u, lam_u1=mu0 / (1 - u), lam_z0=mu0 / z,
    )


def _tracking_gradient_rhs(problem: PenaltyProblem):
    op = problem.spacetime
    return op.restrict(op.apply_M_full(problem.y_d))


def kkt_residuals(it: IpmIterate, problem: PenaltyProblem, mu: float, epsilon: float | None = None,
                  rhs_d=None):
    """Primal and dual infeasibility and the complementarity gap ``(xi_p, xi_d, xi_c)``."""
    op, ks = problem.spacetime, problem.knapsack
    eps = problem.epsilon if epsilon is None else epsilon
    inv_eps = 0.0 if math.isinf(eps) else 1.0 / eps
    if rhs_d is None:
        rhs_d = _tracking_gradient_rhs(problem)
    xi_p = np.concatenate([
        op.apply_K(it.y) - op.apply_Phi(it.u),
        ks.apply(it.u) + it.z - ks.S_vec,
    ])
    xi_d = np.concatenate([
        op.apply_M(it.y) - rhs_d + op.apply_KT(it.p),
        inv_eps * (1 - 2 * it.u) - op.apply_PhiT(it.p) + ks.apply_T(it.q) - it.lam_u0 + it.lam_u1,
        it.q - it.lam_z0,
    ])
    xi_c = np.concatenate([
        it.u * it.lam_u0 - mu,
        (1 - it.u) * it.lam_u1 - mu,
        it.z * it.lam_z0 - mu,
    ])
    return xi_p, xi_d, xi_c


def _mean_complementarity(it: IpmIterate) -> float:
    gaps = np.concatenate([it.u * it.lam_u0, (1 - it.u) * it.lam_u1, it.z * it.lam_z0])
    return float(np.mean(gaps))


def _max_step(x, dx, upper=None):
    """Largest ``alpha <= 1`` keeping ``x + alpha dx`` inside ``(0, upper)``."""
    alpha = 1.0
    neg = dx < 0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-x[neg] / dx[neg])))
    if upper is not None:
        pos = dx > 0
        if np.any(pos):
            alpha = min(alpha, float(np.min((upper - x[pos]) / dx[pos])))
    return alpha


def newton_system(it: IpmIterate, problem: PenaltyProblem, mu, epsilon: float,
                  gamma: float, rhs_d=None, targets=None):
    """Newton operator and right-hand side for barrier parameter ``mu``.

    ``targets = (t0, t1, tz)`` replaces the complementarity targets
    ``u lam_u0 = mu``, ``(1 - u) lam_u1 = mu`` and ``z lam_z0 = mu`` entrywise
    (used by the corrector step).
    """
    op, ks = problem.spacetime, problem.knapsack
    inv_eps = 0.0 if math.isinf(epsilon) else 1.0 / epsilon
    if rhs_d is None:
        rhs_d = _tracking_gradient_rhs(problem)
    t0, t1, tz = (mu, mu, mu) if targets is None else targets
    u, z = it.u, it.z
    theta_u = it.lam_u0 / u + it.lam_u1 / (1 - u)
    theta_z = it.lam_z0 / z
    D_u = clamp_diagonal(-2 * inv_eps + theta_u, gamma)
    newton = NewtonOperator(op, ks, D_u, theta_z)
    rhs = -np.concatenate([
        op.apply_M(it.y) - rhs_d + op.apply_KT(it.p),
        inv_eps * (1 - 2 * u) - op.apply_PhiT(it.p) + ks.apply_T(it.q) - t0 / u + t1 / (1 - u),
        it.q - tz / z,
        op.apply_K(it.y) - op.apply_Phi(u),
        ks.apply(u) + z - ks.S_vec,
    ])
    return newton, rhs


def _multiplier_steps(it: IpmIterate, du, dz, targets):
    t0, t1, tz = targets
    u, z = it.u, it.z
    dl0 = -it.lam_u0 - (it.lam_u0 * du - t0) / u
    dl1 = -it.lam_u1 + (it.lam_u1 * du + t1) / (1 - u)
    dlz = -it.lam_z0 - (it.lam_z0 * dz - tz) / z
    return dl0, dl1, dlz


def _step_lengths(it: IpmIterate, du, dz, dls, tau: float):
    dl0, dl1, dlz = dls
    a_p = min(1.0, tau * min(_max_step(it.u, du, 1.0), _max_step(it.z, dz)))
    a_d = min(1.0, tau * min(_max_step(it.lam_u0, dl0), _max_step(it.lam_u1, dl1),
                             _max_step(it.lam_z0, dlz)))
    return a_p, a_d


def ipm_solve(problem: PenaltyProblem, epsilon: float | None = None, initial_guess=None,
              settings: IpmSettings = IpmSettings(), variant: str | None = None,
              on_iterate=None):
    """Barrier method with one inexact Newton step per barrier value.

    ``initial_guess`` may be a control vector or an :class:`IpmIterate`.
    Returns ``(iterate, report)``; the iterate's state lives in the
    operator's coordinates (use ``problem.spacetime.reconstruct`` for the full
    mesh).  ``on_iterate(k, iterate)`` is called after every accepted step.

    The loop also ends, with ``report.gmres_stalled`` set, when GMRES hits its
    iteration cap ``max_gmres_failures`` times in a row; like the mu floor this
    returns the best iterate rather than raising.  :class:`IpmError` signals
    non-finite directions or residuals.

    The stopping test is ``max(|xi_p|, |xi_d|, |xi_c|) <= kkt_tol`` with the
    complementarity measured against zero, i.e. the KKT residual of the
    original problem rather than of the current barrier subproblem.
    """
    t0 = time.perf_counter()
    op, ks = problem.spacetime, problem.knapsack
    eps = problem.epsilon if epsilon is None else epsilon
    if not eps > 0:
        raise ValueError("penalty parameter must be positive")
    if variant is None:
        variant = REDUCED if op.reduced else FULL
    if settings.eta_rule == "fixed_1e-10":
        variant_eta = REDUCED
    else:
        variant_eta = variant
    if isinstance(initial_guess, IpmIterate):
        it = initial_guess.copy()
        if not it.is_interior():
            it = interiorize(it.u, ks, op, settings.mu0)
    else:
        u0 = np.full(op.n_t * op.l, 0.5) if initial_guess is None else initial_guess
        it = interiorize(u0, ks, op, settings.mu0)

    rhs_d = _tracking_gradient_rhs(problem)
    report = IpmReport()
    best, best_res = it.copy(), math.inf
    mu = settings.mu0
    k = 0
    consecutive_failures = 0
    lu_cache = {}

    def solve(newton, prec, rhs, eta):
        """Newton direction by GMRES; a sparse LU solve replaces a failed GMRES run if enabled."""
        nonlocal consecutive_failures
        res = gmres(newton, prec, rhs, tol=eta, max_iter=settings.gmres_max_iter,
                    restart=settings.gmres_restart)
        if settings.keep_residual_history:
            report.residual_histories.append((mu, list(res.residual_history)))
        x = res.x
        if res.converged:
            consecutive_failures = 0
        else:
            report.gmres_failures += 1
            log.debug("gmres did not reach %.1e (got %.2e) at mu=%.1e", eta, res.relative_residual, mu)
            if settings.direct_fallback:
                if id(newton) not in lu_cache:
                    lu_cache.clear()
                    lu_cache[id(newton)] = spla.splu(newton.sparse())
                x = lu_cache[id(newton)].solve(rhs)
                report.direct_solves += 1
            else:
                consecutive_failures += 1
        if not np.all(np.isfinite(x)):
            raise IpmError(f"non-finite Newton direction at mu={mu:.1e}, eps={eps:.3g}")
        return x, res.iterations, res.relative_residual

    tau = settings.step_fraction
    while True:
        if settings.predictor_corrector:
            # affine-scaling predictor, then a corrector aimed at sigma * gap
            gap = _mean_complementarity(it)
            zero = (0.0, 0.0, 0.0)
            newton, rhs = newton_system(it, problem, 0.0, eps, settings.gamma, rhs_d, zero)
            prec = build_preconditioner(newton)
            eta = eta_for_mu(gap, variant_eta)
            mu = gap
            x_pred, its_pred, _ = solve(newton, prec, rhs, eta)
            _, du, dz, _, _ = newton.split(x_pred)
            dls = _multiplier_steps(it, du, dz, zero)
            a = min(_step_lengths(it, du, dz, dls, 1.0))
            gap_aff = float(np.mean(np.concatenate([
                (it.u + a * du) * (it.lam_u0 + a * dls[0]),
                (1 - it.u - a * du) * (it.lam_u1 + a * dls[1]),
                (it.z + a * dz) * (it.lam_z0 + a * dls[2]),
            ])))
            mu = min(1.0, gap_aff / gap) ** 3 * gap
            targets = (mu - du * dls[0], mu + du * dls[1], mu - dz * dls[2])
            _, rhs = newton_system(it, problem, mu, eps, settings.gamma, rhs_d, targets)
            x, its, rel_res = solve(newton, prec, rhs, eta)
            gmres_its = its_pred + its
        else:
            targets = (mu, mu, mu)
            newton, rhs = newton_system(it, problem, mu, eps, settings.gamma, rhs_d)
            prec = build_preconditioner(newton)
            x, gmres_its, rel_res = solve(newton, prec, rhs, eta_for_mu(mu, variant_eta))
        report.gmres_iterations.append(gmres_its)

        dy, du, dz, dp, dq = newton.split(x)
        dl0, dl1, dlz = _multiplier_steps(it, du, dz, targets)
        a_p, a_d = _step_lengths(it, du, dz, (dl0, dl1, dlz), tau)
        if settings.step_rule == "common":
            a_p = a_d = min(a_p, a_d)
        it = IpmIterate(
            y=it.y + a_p * dy, u=it.u + a_p * du, z=it.z + a_p * dz,
            p=it.p + a_d * dp, q=it.q + a_d * dq,
            lam_u0=it.lam_u0 + a_d * dl0, lam_u1=it.lam_u1 + a_d * dl1, lam_z0=it.lam_z0 + a_d * dlz,
        )
        if not it.is_interior():
            raise IpmError("iterate left the interior")  # fraction-to-boundary guarantees this
        k += 1
        report.nli = k
        if on_iterate is not None:
            on_iterate(k, it)

        xi = kkt_residuals(it, problem, 0.0, eps, rhs_d)
        norms = tuple(float(np.linalg.norm(v)) for v in xi)
        report.history.append({
            "mu": mu, "xi_p": norms[0], "xi_d": norms[1], "xi_c": norms[2],
            "alpha_p": a_p, "alpha_d": a_d, "gmres": gmres_its,
        })
        if max(norms) < best_res:
            best, best_res = it.copy(), max(norms)
            report.residuals = norms
        if not all(math.isfinite(v) for v in norms):
            raise IpmError(f"residual diverged at mu={mu:.1e}, eps={eps:.3g}")
        if max(norms) <= settings.kkt_tol:
            report.converged = True
            best = it
            report.residuals = norms
            break
        if consecutive_failures >= settings.max_gmres_failures:
            report.gmres_stalled = True
            log.warning("GMRES iteration cap reached %d times in a row (mu=%.1e, eps=%.3g, "
                        "residual %.2e); returning the best iterate", consecutive_failures, mu, eps,
                        rel_res)
            break
        if k >= settings.max_iter:
            report.max_iter_reached = True
            log.debug("IPM stopped after %d iterations with residual %.2e", k, best_res)
            break
        if settings.predictor_corrector:
            level = _mean_complementarity(it)
        else:
            mu *= settings.mu_factor
            level = mu
        if level <= settings.mu_floor:
            report.mu_floor_reached = True
            log.debug("IPM hit the mu floor with residual %.2e", best_res)
            break

    y_full = op.reconstruct(best.y)
    report.objective = objective(problem, y_full, best.u, eps)
    report.wall_time = time.perf_counter() - t0
    return best, report
