"""Rounding, perturbation and the improved penalty algorithm (tIPA / MOR-tIPA).

A point ``x = (y, u)`` keeps its state in the coordinates of the problem's
space-time operator (full mesh or reduced), so the same code runs both
variants.  Objectives are always evaluated on reconstructed full-mesh states.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .ipm import IpmError, IpmSettings, ipm_solve
from .spacetime import KnapsackData, PenaltyProblem, forward_map, objective

log = logging.getLogger(__name__)

PER_TIMESTEP = "per_timestep"
GLOBAL = "global"
MAX_ENUMERATION = 10**6


# ---------------------------------------------------------------------------
# rounding


def _blocks(u, l: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.size % l:
        raise ValueError(f"control length {u.size} is not a multiple of l={l}")
    return u.reshape(-1, l)


def naive_round(u) -> np.ndarray:
    """Componentwise rounding to the closest integer (halves round up)."""
    return np.floor(np.asarray(u, dtype=float) + 0.5)


def smart_round(u, S: int, l: int) -> np.ndarray:
    """Keep the ``S`` largest entries of every time block, round them, zero the rest.

    Ties in "largest" are broken by ascending index, so the result is
    deterministic.  The output satisfies the knapsack constraint by
    construction.

    Examples
    --------
    >>> smart_round([0.63, 0.62, 0.61, 0.3, 0.6, 0.9], S=2, l=3)
    array([1., 1., 0., 0., 1., 1.])
    """
    U = _blocks(u, l)
    out = np.zeros_like(U)
    k = min(int(S), l)
    if k > 0:
        order = np.argsort(-U, axis=1, kind="stable")[:, :k]
        rows = np.arange(U.shape[0])[:, None]
        out[rows, order] = naive_round(U[rows, order])
    return out.ravel()


def active_counts(u, l: int) -> np.ndarray:
    """Number of entries above one half in every time block."""
    return np.sum(_blocks(u, l) > 0.5, axis=1)


def infeasibility(u, S: int, l: int) -> float:
    """``|u - [u]_SR|_inf``, the practical distance to the integer-feasible set."""
    u = np.asarray(u, dtype=float)
    return float(np.max(np.abs(u - smart_round(u, S, l)))) if u.size else 0.0


@dataclass
class Point:
    """A pair ``(y, u)`` with ``y`` in the operator's state coordinates."""

    y: np.ndarray
    u: np.ndarray

    def distance(self, other: "Point") -> float:
        return float(np.sqrt(np.sum((self.y - other.y) ** 2) + np.sum((self.u - other.u) ** 2)))


def lift(problem: PenaltyProblem, u) -> Point:
    u = np.asarray(u, dtype=float)
    return Point(forward_map(problem.spacetime, u), u.copy())


def lift_rounded(problem: PenaltyProblem, u) -> Point:
    """``[x]_SR``: smart-round the control and pair it with its exact state."""
    ks = problem.knapsack
    return lift(problem, smart_round(u, ks.S, ks.l))


def point_objective(problem: PenaltyProblem, x: Point, epsilon: float) -> float:
    return objective(problem, problem.spacetime.reconstruct(x.y), x.u, epsilon)


# ---------------------------------------------------------------------------
# adjacency and perturbation


@dataclass(frozen=True)
class AdjacencyMap:
    """For each source, the other sources within ``radius`` in the max-norm."""

    neighbors: tuple
    radius: float

    @classmethod
    def from_centers(cls, centers, radius: float, tol: float = 1e-12) -> "AdjacencyMap":
        c = np.asarray(centers, dtype=float)
        if radius <= 0:
            raise ValueError("radius must be positive")
        dist = np.max(np.abs(c[:, None, :] - c[None, :, :]), axis=2)
        adj = (dist <= radius + tol) & ~np.eye(len(c), dtype=bool)
        return cls(tuple(tuple(int(j) for j in np.flatnonzero(row)) for row in adj), float(radius))

    @property
    def l(self) -> int:
        return len(self.neighbors)

    def __getitem__(self, i: int) -> tuple:
        return self.neighbors[i]

    def is_symmetric(self) -> bool:
        return all(i in self.neighbors[j] for i, nb in enumerate(self.neighbors) for j in nb)


@dataclass
class PerturbResult:
    u: np.ndarray
    flips: int
    skipped: int


def _flip(U, i, j, adj, rng) -> bool:
    nb = adj[j]
    U[i, j] = rng.uniform(0.0, 0.5)
    if not nb:
        return False
    k = nb[rng.integers(len(nb))]
    U[i, k] = 1.0 - rng.uniform(0.0, 0.5)  # uniform on (0.5, 1]
    return True


def perturb_per_timestep(u, theta: int, adj: AdjacencyMap, rng: np.random.Generator) -> PerturbResult:
    """Up to ``theta`` flips in every time block.

    A flip sets a randomly chosen active entry (value above one half) to a
    uniform value in ``[0, 0.5)`` and a random source adjacent to it to a
    uniform value in ``(0.5, 1]``.  A source without neighbours is still
    deactivated; the missing activation is counted in ``skipped``.
    """
    U = _blocks(u, adj.l).copy()
    flips = skipped = 0
    for i in range(U.shape[0]):
        active = list(np.flatnonzero(U[i] > 0.5))
        for _ in range(min(len(active), int(theta))):
            j = active.pop(rng.integers(len(active)))
            flips += 1
            if not _flip(U, i, j, adj, rng):
                skipped += 1
    return PerturbResult(U.ravel(), flips, skipped)


def perturb_global(u, theta: int, adj: AdjacencyMap, rng: np.random.Generator) -> PerturbResult:
    """``theta`` flips in total, drawn from the active entries of all time blocks."""
    U = _blocks(u, adj.l).copy()
    active = list(np.flatnonzero(U.ravel() > 0.5))
    flips = skipped = 0
    for _ in range(min(len(active), int(theta))):
        i, j = divmod(int(active.pop(rng.integers(len(active)))), adj.l)
        flips += 1
        if not _flip(U, i, j, adj, rng):
            skipped += 1
    return PerturbResult(U.ravel(), flips, skipped)


def default_theta(strategy: str, n_t: int, S: int, fraction: float = 0.05) -> int:
    """One flip per step for the per-timestep strategy, ``ceil(fraction n_t S)`` for the global one."""
    if strategy == PER_TIMESTEP:
        return 1
    return max(1, math.ceil(fraction * n_t * S - 1e-12))


# ---------------------------------------------------------------------------
# local search and the outer algorithm


@dataclass(frozen=True)
class IpaSettings:
    epsilon0: float = 1e6
    sigma: float = 0.5
    eps_feas: float = 0.1
    p_max: int = 50
    theta: int | None = None
    strategy: str = PER_TIMESTEP
    rng_seed: int = 0
    max_outer: int = 500
    decrease_rtol: float = 1e-10

    def __post_init__(self):
        if not 0 < self.sigma < 1:
            raise ValueError("sigma must lie in (0, 1)")
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be positive")
        if self.p_max < 1 or self.max_outer < 1:
            raise ValueError("p_max and max_outer must be at least 1")
        if self.theta is not None and self.theta < 1:
            raise ValueError("theta must be at least 1")
        if self.strategy not in (PER_TIMESTEP, GLOBAL):
            raise ValueError(f"unknown perturbation strategy {self.strategy!r}")
        if not self.eps_feas > 0 or self.decrease_rtol < 0:
            raise ValueError("eps_feas must be positive and decrease_rtol nonnegative")

    def theta_for(self, n_t: int, S: int) -> int:
        return self.theta if self.theta is not None else default_theta(self.strategy, n_t, S)

    def rng(self, n: int) -> np.random.Generator:
        """Generator for outer iteration ``n``: child ``n`` of the seed's sequence."""
        return np.random.default_rng(np.random.SeedSequence(self.rng_seed, spawn_key=(n,)))


class LocalSolver:
    """IPM-based local solver for the penalty problem; counts its calls."""

    def __init__(self, problem: PenaltyProblem, settings: IpmSettings = IpmSettings()):
        self.problem = problem
        self.settings = settings
        self.calls = 0
        self.failures = 0
        self.reports = []

    def __call__(self, epsilon: float, u_init) -> Point | None:
        self.calls += 1
        try:
            it, rep = ipm_solve(self.problem, epsilon, initial_guess=u_init, settings=self.settings)
        except IpmError as exc:
            self.failures += 1
            log.warning("local solve failed at eps=%.3g: %s", epsilon, exc)
            return None
        self.reports.append((epsilon, rep))
        return Point(it.y, it.u)


@dataclass
class ReductionResult:
    x: Point
    improved: bool
    calls: int
    perturbations: int
    skipped: int
    failures: int


def reduction_via_perturbation(problem: PenaltyProblem, x: Point, p_max: int, epsilon: float,
                               local_solver: Callable, perturb: Callable,
                               rng: np.random.Generator, decrease_rtol: float = 0.0) -> ReductionResult:
    """Local solves from perturbed starting points until the objective decreases.

    Returns the first local solution with ``J(x_loc) < J(x)`` (less a relative
    margin ``decrease_rtol``), otherwise ``x`` itself after ``p_max`` solves.
    A failed local solve is followed by a perturbation of the last start.
    """
    J_x = point_objective(problem, x, epsilon)
    threshold = J_x - decrease_rtol * abs(J_x)
    u_init = x.u
    perturbations = skipped = failures = 0
    for j in range(1, p_max + 1):
        x_loc = local_solver(epsilon, u_init)
        if x_loc is None:
            failures += 1
            base = u_init
        else:
            if point_objective(problem, x_loc, epsilon) < threshold:
                return ReductionResult(x_loc, True, j, perturbations, skipped, failures)
            base = x_loc.u
        if j < p_max:
            res = perturb(base, rng)
            perturbations += 1
            skipped += res.skipped
            u_init = res.u
    return ReductionResult(x, False, p_max, perturbations, skipped, failures)


@dataclass
class IpaTrace:
    """One record per outer iteration plus the termination reason."""

    variant: str
    records: list = field(default_factory=list)
    termination: str = ""
    subsolver_calls: int = 0

    @property
    def epsilons(self) -> list:
        return [r["epsilon"] for r in self.records]

    @property
    def outer_iterations(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        cols = ["n", "epsilon", "J", "J_rounded", "feasible", "subsolver_calls",
                "perturbations", "skipped_flips", "improved"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.records:
                w.writerow({c: r[c] for c in cols})

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)


@dataclass
class IpaResult:
    x: Point
    objective: float
    trace: IpaTrace
    relaxed: Point


def relaxation_start(problem: PenaltyProblem, ipm_settings: IpmSettings = IpmSettings()) -> Point:
    """Solution of the continuous relaxation (penalty off), the outer algorithm's ``x^0``."""
    it, _ = ipm_solve(problem, math.inf, settings=ipm_settings)
    return Point(it.y, it.u)


def tipa(problem: PenaltyProblem, settings: IpaSettings = IpaSettings(), adjacency: AdjacencyMap | None = None,
         ipm_settings: IpmSettings = IpmSettings(), x0: Point | None = None,
         local_solver: Callable | None = None) -> IpaResult:
    """Improved penalty algorithm on the problem's operator (full or reduced).

    The loop stops when the local search finds no decrease and the penalty
    parameter was left unchanged; after a decrease of ``eps`` an unchanged
    iterate is no longer known to be locally optimal, so the search goes on.

    ``adjacency`` defaults to every pair of sources being adjacent.  The
    returned point is the smart-rounded final iterate; its objective is the
    penalty-free tracking value.
    """
    ks: KnapsackData = problem.knapsack
    op = problem.spacetime
    if adjacency is None:
        adjacency = AdjacencyMap(tuple(tuple(j for j in range(ks.l) if j != i) for i in range(ks.l)), math.inf)
    if adjacency.l != ks.l:
        raise ValueError("adjacency map does not match the number of sources")
    theta = settings.theta_for(ks.n_t, ks.S)
    flip = perturb_per_timestep if settings.strategy == PER_TIMESTEP else perturb_global

    def perturb(u, rng):
        return flip(u, theta, adjacency, rng)

    if local_solver is None:
        local_solver = LocalSolver(problem, ipm_settings)
    trace = IpaTrace(variant="mor" if op.reduced else "full")
    x = relaxation_start(problem, ipm_settings) if x0 is None else x0
    relaxed = x
    eps = settings.epsilon0
    for n in range(settings.max_outer):
        red = reduction_via_perturbation(problem, x, settings.p_max, eps, local_solver, perturb,
                                         settings.rng(n), settings.decrease_rtol)
        trace.subsolver_calls += red.calls
        x_new = red.x
        x_sr = lift_rounded(problem, x_new.u)
        feasible = infeasibility(x_new.u, ks.S, ks.l) <= settings.eps_feas
        J_new = point_objective(problem, x_new, eps)
        J_sr = point_objective(problem, x_sr, eps)
        trace.records.append({
            "n": n, "epsilon": eps, "J": J_new, "J_rounded": J_sr, "feasible": feasible,
            "subsolver_calls": red.calls, "perturbations": red.perturbations,
            "skipped_flips": red.skipped, "improved": red.improved,
        })
        decreased = not feasible and J_new - J_sr <= eps * x_new.distance(x_sr)
        if decreased:
            eps *= settings.sigma
        if not red.improved and not decreased:
            trace.termination = "no_improvement"
            break
        x = x_new
    else:
        trace.termination = "max_outer"
        log.warning("outer iteration cap %d reached", settings.max_outer)
    x_final = lift_rounded(problem, x.u)
    return IpaResult(x_final, point_objective(problem, x_final, math.inf), trace, relaxed)


# ---------------------------------------------------------------------------
# exhaustive oracle


class EnumerationTooLarge(ValueError):
    pass


def block_patterns(l: int, S: int) -> np.ndarray:
    """All binary vectors of length ``l`` with at most ``S`` ones (fewest ones first)."""
    rows = []
    for k in range(min(S, l) + 1):
        for idx in itertools.combinations(range(l), k):
            v = np.zeros(l)
            v[list(idx)] = 1.0
            rows.append(v)
    return np.array(rows)


def count_candidates(n_t: int, l: int, S: int) -> int:
    per_block = sum(math.comb(l, k) for k in range(min(S, l) + 1))
    return per_block ** n_t


def tracking_quadratic(problem: PenaltyProblem):
    """``(H, g, c)`` with ``J(u) = u^T H u / 2 + g^T u + c`` on reconstructed states."""
    op = problem.spacetime
    n_u = op.n_t * op.l
    G = np.column_stack([op.reconstruct(forward_map(op, e)) for e in np.eye(n_u)])
    MG = np.column_stack([op.apply_M_full(col) for col in G.T])
    H = G.T @ MG
    H = 0.5 * (H + H.T)
    My = op.apply_M_full(problem.y_d)
    return H, -G.T @ My, 0.5 * float(problem.y_d @ My)


def brute_force_solve(problem: PenaltyProblem, limit: int = MAX_ENUMERATION, batch: int = 4096):
    """Global optimum of the integer problem by enumerating every feasible binary control.

    Returns ``(u_opt, J_opt)``; among tied candidates the first in enumeration
    order wins.
    """
    ks = problem.knapsack
    total = count_candidates(ks.n_t, ks.l, ks.S)
    if total > limit:
        raise EnumerationTooLarge(f"{total} candidates exceed the enumeration limit {limit}")
    H, g, c = tracking_quadratic(problem)
    pats = block_patterns(ks.l, int(ks.S))
    best_val, best_u = math.inf, None
    combos = itertools.product(range(len(pats)), repeat=ks.n_t)
    while True:
        chunk = list(itertools.islice(combos, batch))
        if not chunk:
            break
        U = pats[np.array(chunk)].reshape(len(chunk), -1)
        vals = 0.5 * np.einsum("ij,ij->i", U @ H, U) + U @ g + c
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best_u = float(vals[k]), U[k].copy()
    return best_u, best_val
