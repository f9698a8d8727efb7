"""Instance generation, desk-scale experiments and their metrics."""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .balanced_truncation import (ReducedModel, gramian_factors, hankel_spectrum, min_dimension,
                                  reduce as bt_reduce, tail_curve)
from .ipm import IpmSettings
from .mesh_fem import CONVECTION_DIFFUSION, KINDS, POISSON, FemSystem, SourceLayout, assemble, default_layout
from .penalty import GLOBAL, PER_TIMESTEP, AdjacencyMap, IpaSettings, LocalSolver, tipa
from .spacetime import (KnapsackData, PenaltyProblem, SpaceTimeOperator, TimeGrid, build_reduced_spacetime,
                        build_spacetime, forward_map, tracking)

log = logging.getLogger(__name__)

DESK = dict(h=2.0**-4, n_t=10, m=3)
PAPER = dict(h=2.0**-6, n_t=40, m=5)
TABLE2_TOL = 1e-5


@dataclass(frozen=True)
class InstanceSpec:
    """One randomly generated desired state; ``l = m**2`` control sources."""

    kind: str = POISSON
    h: float = DESK["h"]
    n_t: int = DESK["n_t"]
    m: int = DESK["m"]
    S: int = 2
    seed: int = 0
    T: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.m < 1 or self.S < 0 or self.S > self.m**2:
            raise ValueError("need m >= 1 and 0 <= S <= m**2")

    @property
    def l(self) -> int:
        return self.m**2


@dataclass
class Instance:
    spec: InstanceSpec
    fem: FemSystem
    problem: PenaltyProblem
    generator_centers: np.ndarray
    adjacency: AdjacencyMap


def generator_values(fem: FemSystem, centers: np.ndarray, m: int) -> np.ndarray:
    """Values at the free vertices of sources placed at ``centers``.

    Gaussian sources reuse the control sources' height and width; for the
    convection-diffusion problem each source is the indicator of an
    axis-aligned square of side ``1/m`` around its center.
    """
    pts = fem.mesh.vertex_coords[fem.free]
    lay = fem.layout
    centers = np.asarray(centers, dtype=float).reshape(-1, 2)
    if lay.shape == "gaussian":
        gen = SourceLayout(centers, lay.kappa, lay.omega, lay.grid_spacing, lay.adjacency_radius)
        return gen.evaluate(pts)
    half = 0.5 / m
    inside = np.max(np.abs(pts[:, None, :] - centers[None, :, :]), axis=2) <= half + 1e-12
    return lay.kappa * inside.astype(float)


def generate_instance(spec: InstanceSpec, fem: FemSystem | None = None,
                      op: SpaceTimeOperator | None = None) -> Instance:
    """Desired state from ``S`` sources at random centers in ``[0.1, 0.9]^2``, active at all times."""
    if fem is None:
        fem = assemble(spec.kind, spec.h, m=spec.m)
    tg = TimeGrid(spec.n_t, spec.T)
    if op is None:
        op = build_spacetime(fem, tg)
    rng = np.random.default_rng(spec.seed)
    centers = rng.uniform(0.1, 0.9, size=(spec.S, 2))
    if spec.S == 0:
        y_d = np.zeros(spec.n_t * fem.N)
    else:
        gen_B = np.asarray(fem.M @ generator_values(fem, centers, spec.m))
        gen_op = SpaceTimeOperator(op.K1, op.K2, gen_B, op.obs, op.obs_full, tg)
        y_d = forward_map(gen_op, np.ones(spec.n_t * spec.S))
    problem = PenaltyProblem(op, KnapsackData(spec.n_t, fem.l, spec.S), y_d)
    adj = AdjacencyMap.from_centers(fem.layout.centers, fem.layout.adjacency_radius)
    return Instance(spec, fem, problem, centers, adj)


def reduced_problem(inst: Instance, r: int | None = None, tol: float | None = TABLE2_TOL,
                    model: ReducedModel | None = None):
    """The instance on the balanced-truncation operator; returns ``(problem, model)``."""
    if model is None:
        model = bt_reduce(inst.fem, r=r, tol=None if r is not None else tol)
    op = build_reduced_spacetime(model, inst.fem, inst.problem.spacetime.time)
    return inst.problem.with_operator(op), model


# ---------------------------------------------------------------------------
# Hankel-value experiments


def experiment_sigma_decay(kind: str, h: float, m: int = 5):
    """Rows ``(r, Sigma(r))`` for ``r = 0 .. len(sigma)`` and the Hankel values themselves."""
    fem = assemble(kind, h, m=m)
    f = gramian_factors(fem)
    spec = hankel_spectrum(f.L, fem.M, f.R)
    tails = np.append(tail_curve(spec.sigma), 0.0)
    return [(r, float(t)) for r, t in enumerate(tails)], spec.sigma


def experiment_r_vs_h(kind: str, h_list, tol: float = TABLE2_TOL, m: int = 5):
    """Smallest ``r`` with ``Sigma(r) <= tol`` for every mesh width."""
    rows = []
    for h in h_list:
        t0 = time.perf_counter()
        fem = assemble(kind, h, m=m)
        f = gramian_factors(fem)
        spec = hankel_spectrum(f.L, fem.M, f.R)
        rows.append({"kind": kind, "h": h, "N": fem.N, "r": min_dimension(spec, tol),
                     "seconds": time.perf_counter() - t0})
    return rows


def table2(h_list=(2.0**-4, 2.0**-5), tol: float = TABLE2_TOL):
    return [row for kind in (POISSON, CONVECTION_DIFFUSION) for row in experiment_r_vs_h(kind, h_list, tol)]


# ---------------------------------------------------------------------------
# algorithm comparisons


@dataclass(frozen=True)
class AlgorithmVariant:
    """An outer-algorithm configuration: operator, perturbation strategy and flip count."""

    name: str
    mor: bool = False
    strategy: str = PER_TIMESTEP
    theta_fraction: float | None = None  # global strategy: flips = ceil(fraction n_t S)
    theta: int | None = None

    def theta_for(self, n_t: int, S: int) -> int | None:
        if self.theta is not None:
            return self.theta
        if self.theta_fraction is not None:
            return max(1, math.ceil(self.theta_fraction * n_t * S - 1e-12))
        return None


TIPA = AlgorithmVariant("tIPA")
MOR_TIPA = AlgorithmVariant("MOR-tIPA", mor=True)
VARIANTS = (
    AlgorithmVariant("V1", mor=True, strategy=PER_TIMESTEP, theta=1),
    AlgorithmVariant("V2", mor=True, strategy=GLOBAL, theta_fraction=0.05),
    AlgorithmVariant("V3", mor=True, strategy=GLOBAL, theta_fraction=0.10),
    AlgorithmVariant("V4", mor=True, strategy=GLOBAL, theta_fraction=0.20),
)


@dataclass
class RunRecord:
    instance: int
    algorithm: str
    objective: float
    objective_full: float
    wall_time: float
    subsolver_calls: int
    outer_iterations: int
    final_epsilon: float
    termination: str
    error: str = ""
    control: list = field(default_factory=list, repr=False)
    ipm_trace: list = field(default_factory=list, repr=False)


def run_variant(inst: Instance, variant: AlgorithmVariant, ipa: IpaSettings = IpaSettings(),
                ipm: IpmSettings = IpmSettings(), index: int = 0, mor_r: int | None = None,
                mor_tol: float | None = TABLE2_TOL, model: ReducedModel | None = None) -> RunRecord:
    """One outer-algorithm run; failures are recorded, not raised."""
    t0 = time.perf_counter()
    try:
        problem = inst.problem
        if variant.mor:
            problem, model = reduced_problem(inst, mor_r, mor_tol, model)
        settings = IpaSettings(**{**asdict(ipa), "strategy": variant.strategy,
                                  "theta": variant.theta_for(inst.spec.n_t, inst.spec.S)})
        solver = LocalSolver(problem, ipm)
        res = tipa(problem, settings, inst.adjacency, ipm, local_solver=solver)
        u = res.x.u
        J_full = _full_objective(inst.problem, u)
        return RunRecord(index, variant.name, res.objective, J_full, time.perf_counter() - t0,
                         res.trace.subsolver_calls, res.trace.outer_iterations,
                         res.trace.epsilons[-1] if res.trace.records else ipa.epsilon0,
                         res.trace.termination, control=u.tolist(),
                         ipm_trace=[{"epsilon": e, "nli": r.nli, "agmres": r.agmres} for e, r in solver.reports])
    except Exception as exc:  # per-run failures are part of the result
        log.warning("run %s on instance %d failed: %s", variant.name, index, exc)
        return RunRecord(index, variant.name, math.nan, math.nan, time.perf_counter() - t0, 0, 0,
                         math.nan, "error", error=f"{type(exc).__name__}: {exc}")


def _full_objective(problem: PenaltyProblem, u) -> float:
    """Tracking value of ``u`` under the full forward map (for MOR comparisons)."""
    return tracking(problem, problem.state(u))


def compare_metrics(objectives: dict, rtol: float = 1e-9):
    """``min_count`` and ``rel_err_av`` over a dict ``algorithm -> list of objectives``.

    An algorithm scores on an instance when its objective is within ``rtol``
    of the smallest one; ``rel_err_av`` averages only the nonzero relative
    errors (``nan`` if there are none).  Failed runs (``nan``) never score.
    """
    names = list(objectives)
    table = np.array([objectives[a] for a in names], dtype=float)
    n_inst = table.shape[1] if table.ndim == 2 else 0
    min_count = {a: 0 for a in names}
    rel = {a: [] for a in names}
    for j in range(n_inst):
        col = table[:, j]
        if np.all(np.isnan(col)):
            continue
        best = np.nanmin(col)
        scale = abs(best) if best != 0 else 1.0
        for i, a in enumerate(names):
            if np.isnan(col[i]):
                continue
            err = (col[i] - best) / scale
            if err <= rtol:
                min_count[a] += 1
            else:
                rel[a].append(err)
    rel_err_av = {a: (float(np.mean(v)) if v else math.nan) for a, v in rel.items()}
    return min_count, rel_err_av


@dataclass
class ExperimentResult:
    runs: list
    algorithms: list
    min_count: dict
    rel_err_av: dict
    av_subsolvercalls: dict
    t_av: dict

    @classmethod
    def from_runs(cls, runs: list, algorithms: list) -> "ExperimentResult":
        n = max((r.instance for r in runs), default=-1) + 1
        obj = {a: [math.nan] * n for a in algorithms}
        for r in runs:
            obj[r.algorithm][r.instance] = r.objective
        mc, rea = compare_metrics(obj)
        calls = {a: float(np.mean([r.subsolver_calls for r in runs if r.algorithm == a and not r.error] or [math.nan]))
                 for a in algorithms}
        t_av = {a: float(np.mean([r.wall_time for r in runs if r.algorithm == a])) for a in algorithms}
        return cls(runs, list(algorithms), mc, rea, calls, t_av)

    def objectives(self) -> dict:
        n = max((r.instance for r in self.runs), default=-1) + 1
        obj = {a: [math.nan] * n for a in self.algorithms}
        for r in self.runs:
            obj[r.algorithm][r.instance] = r.objective
        return obj

    def write_runs_csv(self, path) -> None:
        cols = ["instance", "algorithm", "objective", "objective_full", "wall_time", "subsolver_calls",
                "outer_iterations", "final_epsilon", "termination", "error"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in sorted(self.runs, key=lambda r: (r.instance, self.algorithms.index(r.algorithm))):
                w.writerow({c: getattr(r, c) for c in cols})

    def write_summary_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["algorithm", "min_count", "rel_err_av", "av_subsolvercalls", "t_av"])
            for a in self.algorithms:
                w.writerow([a, self.min_count[a], self.rel_err_av[a], self.av_subsolvercalls[a], self.t_av[a]])

    def write_ipm_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "algorithm", "epsilon", "nli", "agmres"])
            for r in self.runs:
                for t in r.ipm_trace:
                    w.writerow([r.instance, r.algorithm, t["epsilon"], t["nli"], t["agmres"]])


def _run_job(args):
    spec, variant, ipa, ipm, index, mor_r, mor_tol = args
    inst = generate_instance(spec)
    return run_variant(inst, variant, ipa, ipm, index, mor_r, mor_tol)


def experiment_compare(specs, variants=(TIPA, MOR_TIPA), ipa: IpaSettings = IpaSettings(),
                       ipm: IpmSettings = IpmSettings(), mor_r: int | None = None,
                       mor_tol: float | None = TABLE2_TOL, workers: int = 1) -> ExperimentResult:
    """Run every variant on every instance; results are ordered by instance index.

    The random stream of a run depends only on ``ipa.rng_seed`` and the
    instance index, so serial and parallel runs agree.
    """
    jobs = []
    for i, spec in enumerate(specs):
        run_ipa = IpaSettings(**{**asdict(ipa), "rng_seed": ipa.rng_seed + 1000 * i})
        jobs += [(spec, v, run_ipa, ipm, i, mor_r, mor_tol) for v in variants]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            runs = list(pool.map(_run_job, jobs))
    else:
        cache = {}
        runs = []
        for spec, v, run_ipa, run_ipm, i, r, tol in jobs:
            if i not in cache:
                cache = {i: generate_instance(spec)}
            runs.append(run_variant(cache[i], v, run_ipa, run_ipm, i, r, tol))
    return ExperimentResult.from_runs(runs, [v.name for v in variants])


# ---------------------------------------------------------------------------
# output helpers


def write_rows_csv(path, rows, header=None) -> None:
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        if rows and isinstance(rows[0], dict):
            w = csv.DictWriter(fh, fieldnames=header or list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        else:
            w = csv.writer(fh)
            if header:
                w.writerow(header)
            w.writerows(rows)


def write_residual_history_csv(path, histories) -> None:
    """``histories`` is a list of ``(mu, residual_history)`` pairs, one per GMRES solve."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["solve", "mu", "iteration", "relative_residual"])
        for k, (mu, hist) in enumerate(histories):
            for it, res in enumerate(hist):
                w.writerow([k, mu, it, res])


def versions() -> dict:
    import matplotlib

    return {"mipdeco": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "matplotlib": matplotlib.__version__, "platform": platform.platform()}


def write_manifest(directory, command: str, config: dict, seeds: dict, wall_time: float,
                   outputs=()) -> Path:
    path = Path(directory) / "manifest.json"
    manifest = {
        "command": command, "argv": sys.argv, "config": config, "seeds": seeds,
        "versions": versions(), "wall_time_seconds": wall_time,
        "outputs": [str(Path(p).name) for p in outputs],
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


__all__ = [
    "DESK", "PAPER", "InstanceSpec", "Instance", "generate_instance", "reduced_problem",
    "experiment_sigma_decay", "experiment_r_vs_h", "table2", "AlgorithmVariant", "TIPA", "MOR_TIPA",
    "VARIANTS", "run_variant", "compare_metrics", "ExperimentResult", "experiment_compare",
    "default_layout",
]
