"""Command-line interface: ``mipdeco [global flags] <command> [options]``.

Exit status is 0 on success.  On failure a single JSON line
``{"error": {"category": ..., "message": ...}}`` goes to stderr and the
status encodes the category (2 config/usage, 3 too large, 4 numerical,
1 anything else).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import harness as hz
from .balanced_truncation import LyapunovError, reduce as bt_reduce, tail_curve
from .config import ConfigError, RunConfig, load_config
from .ipm import IpmError, ipm_solve
from .krylov import PreconditionerError
from .mesh_fem import KINDS, assemble, export_matrix_market
from .penalty import GLOBAL, PER_TIMESTEP, EnumerationTooLarge, IpaSettings, LocalSolver, brute_force_solve, tipa
from .spacetime import FactorizationError, save_vector_csv, tracking

log = logging.getLogger("mipdeco")

OUTPUT_ENV = "MIPDECO_OUTPUT_DIR"
EXIT_CODES = {"config": 2, "too_large": 3, "numerical": 4, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------------------
# argument parsing


def _instance_args(p):
    g = p.add_argument_group("instance")
    g.add_argument("--kind", choices=KINDS)
    g.add_argument("--h", type=float, help="mesh width (1/h a power of two >= 4)")
    g.add_argument("--n-t", dest="n_t", type=int, help="number of time steps")
    g.add_argument("--m", type=int, help="sources per direction (l = m^2)")
    g.add_argument("--S", type=int, help="knapsack budget per time step")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="instance and algorithm seed")


def _mor_args(p):
    p.add_argument("--r", type=int, help="reduced dimension (default: smallest with Sigma(r) <= tol)")
    p.add_argument("--tol", type=float, help="Hankel tail tolerance")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mipdeco", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="configuration file (key = value with sections)")
    ap.add_argument("--seed", type=int, help="instance and algorithm seed")
    ap.add_argument("--output-dir", help=f"output directory (overrides ${OUTPUT_ENV})")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("-q", "--quiet", action="count", default=0)
    ap.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("assemble", help="write the FEM matrices as Matrix Market files")
    _instance_args(p)

    p = sub.add_parser("reduce", help="balanced truncation; writes the reduced model bundle")
    _instance_args(p)
    _mor_args(p)

    p = sub.add_parser("relax", help="solve the continuous relaxation with the IPM")
    _instance_args(p)
    _mor_args(p)
    p.add_argument("--epsilon", type=float, default=math.inf, help="penalty parameter (default: off)")
    p.add_argument("--mor", action="store_true", help="use the reduced operator")
    p.add_argument("--residual-history", action="store_true", help="dump GMRES residual histories")

    p = sub.add_parser("solve", help="run tIPA or MOR-tIPA on a generated instance")
    _instance_args(p)
    _mor_args(p)
    p.add_argument("--variant", choices=("full", "mor"), default="full")
    p.add_argument("--p-max", dest="p_max", type=int)
    p.add_argument("--strategy", choices=(PER_TIMESTEP, GLOBAL))
    p.add_argument("--theta", type=int)

    p = sub.add_parser("oracle", help="brute-force global optimum of a tiny instance")
    _instance_args(p)

    p = sub.add_parser("experiment", help="desk-scale experiments")
    esub = p.add_subparsers(dest="experiment", required=True)
    e = esub.add_parser("sigma", help="Hankel tail Sigma(r) over r")
    e.add_argument("--kind", choices=KINDS, action="append")
    e.add_argument("--h", type=float, default=2.0**-4)
    e = esub.add_parser("table2", help="smallest r with Sigma(r) <= tol per mesh width")
    e.add_argument("--h-list", type=float, nargs="+", default=[2.0**-4, 2.0**-5])
    e.add_argument("--tol", type=float, default=hz.TABLE2_TOL)
    for name, text in (("compare", "tIPA vs MOR-tIPA on generated instances"),
                       ("variants", "perturbation variants V1-V4 of the MOR-tIPA")):
        e = esub.add_parser(name, help=text)
        _instance_args(e)
        _mor_args(e)
        e.add_argument("--instances", type=int)
        e.add_argument("--p-max", dest="p_max", type=int)
        e.add_argument("--workers", type=int)
    return ap


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    inst = {k: getattr(args, k) for k in ("kind", "h", "n_t", "m", "S") if getattr(args, k, None) is not None}
    if args.seed is not None:
        inst["seed"] = args.seed
        cfg.ipa = replace(cfg.ipa, rng_seed=args.seed)
    try:
        cfg.instance = replace(cfg.instance, **inst)
        ipa = {k: getattr(args, k) for k in ("p_max", "strategy", "theta") if getattr(args, k, None) is not None}
        if ipa:
            cfg.ipa = replace(cfg.ipa, **ipa)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for k in ("r", "tol"):
        if getattr(args, k, None) is not None:
            cfg.mor[k] = getattr(args, k)
    if getattr(args, "r", None) is not None:
        cfg.mor["tol"] = None
    for k in ("instances", "workers"):
        if getattr(args, k, None) is not None:
            cfg.experiment[k] = getattr(args, k)
    if getattr(args, "residual_history", False):
        cfg.output["residual_history"] = True
    if args.no_plots:
        cfg.output["plots"] = False
    return cfg


def _output_dir(args, cfg: RunConfig) -> Path:
    d = args.output_dir or os.environ.get(OUTPUT_ENV) or cfg.output.get("dir") or "mipdeco-out"
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _instance(cfg: RunConfig) -> hz.Instance:
    return hz.generate_instance(cfg.instance)


def _problem(inst: hz.Instance, cfg: RunConfig, mor: bool):
    if not mor:
        return inst.problem, None
    return hz.reduced_problem(inst, cfg.mor.get("r"), cfg.mor.get("tol"))


# ---------------------------------------------------------------------------
# commands


def cmd_assemble(args, cfg, out):
    s = cfg.instance
    fem = assemble(s.kind, s.h, m=s.m)
    paths = export_matrix_market(fem, out)
    coords = out / "free_vertices.csv"
    np.savetxt(coords, fem.mesh.vertex_coords[fem.free], delimiter=",", header="x,y", comments="", fmt="%.17g")
    print(f"N={fem.N} l={fem.l} p={fem.p}; wrote {len(paths) + 1} files to {out}")
    return paths + [coords]


def cmd_reduce(args, cfg, out):
    s = cfg.instance
    fem = assemble(s.kind, s.h, m=s.m)
    r = cfg.mor.get("r")
    model = bt_reduce(fem, r=r, tol=None if r is not None else cfg.mor.get("tol"))
    bundle = out / "reduced_model.npz"
    model.save(bundle)
    sigma = model.hankel
    tails = np.append(tail_curve(sigma), 0.0)
    rows = [(r, float(sigma[r]) if r < len(sigma) else 0.0, float(tails[r])) for r in range(len(tails))]
    csv_path = out / "hankel.csv"
    hz.write_rows_csv(csv_path, rows, ["r", "sigma_r_plus_1", "tail"])
    outputs = [bundle, csv_path]
    if cfg.output["plots"]:
        from .plotting import plot_sigma_decay

        outputs.append(plot_sigma_decay({s.kind: [(r, t) for r, _, t in rows]}, out / "sigma_decay.png"))
    print(f"r={model.r} (N={model.N}); Sigma(r)={tails[model.r]:.3e}")
    return outputs


def cmd_relax(args, cfg, out):
    inst = _instance(cfg)
    problem, model = _problem(inst, cfg, args.mor)
    ipm = replace(cfg.ipm, keep_residual_history=bool(cfg.output["residual_history"]))
    it, rep = ipm_solve(problem, args.epsilon, settings=ipm)
    n_t = cfg.instance.n_t
    ctrl = out / "control.csv"
    save_vector_csv(ctrl, it.u, n_t)
    hist = out / "ipm_history.csv"
    hz.write_rows_csv(hist, rep.history)
    outputs = [ctrl, hist]
    if cfg.output["residual_history"]:
        path = out / "residual_history.csv"
        hz.write_residual_history_csv(path, rep.residual_histories)
        outputs.append(path)
    if cfg.output["plots"]:
        from .plotting import plot_control, plot_residual_histories

        outputs.append(plot_control(it.u, n_t, out / "control.png", "relaxed control"))
        if rep.residual_histories:
            outputs.append(plot_residual_histories(rep.residual_histories, out / "residual_history.png"))
    print(f"objective={rep.objective:.10e} NLI={rep.nli} aGMRES={rep.agmres:.1f} converged={rep.converged}"
          + (f" r={model.r}" if model is not None else ""))
    return outputs


def cmd_solve(args, cfg, out):
    inst = _instance(cfg)
    problem, model = _problem(inst, cfg, args.variant == "mor")
    solver = LocalSolver(problem, cfg.ipm)
    res = tipa(problem, cfg.ipa, inst.adjacency, cfg.ipm, local_solver=solver)
    n_t = cfg.instance.n_t
    trace_csv, trace_json = out / "trace.csv", out / "trace.json"
    res.trace.to_csv(trace_csv)
    res.trace.to_json(trace_json)
    ctrl = out / "control.csv"
    save_vector_csv(ctrl, res.x.u, n_t)
    ipm_rows = [{"epsilon": e, "nli": r.nli, "agmres": r.agmres, "converged": r.converged} for e, r in solver.reports]
    ipm_csv = out / "ipm_trace.csv"
    hz.write_rows_csv(ipm_csv, ipm_rows, ["epsilon", "nli", "agmres", "converged"])
    outputs = [trace_csv, trace_json, ctrl, ipm_csv]
    if cfg.output["plots"]:
        from .plotting import plot_control, plot_ipm_trace

        outputs.append(plot_control(res.x.u, n_t, out / "control.png", f"{res.trace.variant} control"))
        outputs.append(plot_ipm_trace({res.trace.variant: ipm_rows}, out / "ipm_trace.png"))
    J_full = tracking(inst.problem, inst.problem.state(res.x.u))
    print(f"objective={res.objective:.10e} full-map objective={J_full:.10e} "
          f"outer={res.trace.outer_iterations} subsolver_calls={res.trace.subsolver_calls} "
          f"termination={res.trace.termination}" + (f" r={model.r}" if model is not None else ""))
    return outputs


def cmd_oracle(args, cfg, out):
    inst = _instance(cfg)
    try:
        u, J = brute_force_solve(inst.problem)
    except EnumerationTooLarge as exc:
        raise CliError("too_large", str(exc)) from exc
    ctrl = out / "oracle_control.csv"
    save_vector_csv(ctrl, u, cfg.instance.n_t)
    res = out / "oracle.json"
    res.write_text(json.dumps({"objective": J, "candidates": int(_candidates(cfg))}, indent=2))
    print(f"optimal objective={J:.10e}")
    return [ctrl, res]


def _candidates(cfg):
    from .penalty import count_candidates

    s = cfg.instance
    return count_candidates(s.n_t, s.l, s.S)


def cmd_experiment(args, cfg, out):
    kind = args.experiment
    if kind == "sigma":
        curves = {}
        outputs = []
        for k in args.kind or list(KINDS):
            rows, _ = hz.experiment_sigma_decay(k, args.h)
            path = out / f"sigma_{k}.csv"
            hz.write_rows_csv(path, rows, ["r", "Sigma"])
            curves[k] = rows
            outputs.append(path)
        if cfg.output["plots"]:
            from .plotting import plot_sigma_decay

            outputs.append(plot_sigma_decay(curves, out / "sigma_decay.png"))
        return outputs
    if kind == "table2":
        rows = hz.table2(tuple(args.h_list), args.tol)
        path = out / "table2.csv"
        hz.write_rows_csv(path, rows, ["kind", "h", "N", "r", "seconds"])
        for r in rows:
            print(f"{r['kind']:>22s} h=2^{round(math.log2(r['h']))} N={r['N']} r={r['r']}")
        return [path]
    base = cfg.instance
    specs = [replace(base, seed=base.seed + i) for i in range(cfg.experiment["instances"])]
    variants = (hz.TIPA, hz.MOR_TIPA) if kind == "compare" else hz.VARIANTS
    res = hz.experiment_compare(specs, variants, cfg.ipa, cfg.ipm, cfg.mor.get("r"), cfg.mor.get("tol"),
                                workers=cfg.experiment["workers"])
    runs, summary, trace = out / "runs.csv", out / "summary.csv", out / "ipm_trace.csv"
    res.write_runs_csv(runs)
    res.write_summary_csv(summary)
    res.write_ipm_trace_csv(trace)
    outputs = [runs, summary, trace]
    if cfg.output["plots"]:
        from .plotting import plot_ipm_trace, plot_objective_boxes

        outputs.append(plot_objective_boxes(res.objectives(), out / "objectives_box.png"))
        traces = {a: [t for r in res.runs if r.algorithm == a for t in r.ipm_trace] for a in res.algorithms}
        outputs.append(plot_ipm_trace(traces, out / "ipm_trace.png"))
    for a in res.algorithms:
        print(f"{a:>10s} min_count={res.min_count[a]} rel_err_av={res.rel_err_av[a]:.3e} "
              f"av_subsolvercalls={res.av_subsolvercalls[a]:.1f} t_av={res.t_av[a]:.1f}s")
    return outputs


COMMANDS = {"assemble": cmd_assemble, "reduce": cmd_reduce, "relax": cmd_relax, "solve": cmd_solve,
            "oracle": cmd_oracle, "experiment": cmd_experiment}


def _fail(category: str, message: str) -> int:
    print(json.dumps({"error": {"category": category, "message": message}}), file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_CODES["config"] if exc.code else 0
    level = logging.WARNING - 10 * args.verbose + 10 * args.quiet
    logging.basicConfig(level=max(logging.DEBUG, min(level, logging.CRITICAL)),
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = _config(args)
        out = _output_dir(args, cfg)
        outputs = COMMANDS[args.command](args, cfg, out)
        name = args.command + (f" {args.experiment}" if args.command == "experiment" else "")
        seeds = {"instance": cfg.instance.seed, "ipa": cfg.ipa.rng_seed}
        hz.write_manifest(out, name, cfg.as_dict(), seeds, time.perf_counter() - t0, outputs)
    except ConfigError as exc:
        return _fail("config", str(exc))
    except (EnumerationTooLarge,) as exc:
        return _fail("too_large", str(exc))
    except CliError as exc:
        return _fail(exc.category, str(exc))
    except (IpmError, LyapunovError, FactorizationError, PreconditionerError, np.linalg.LinAlgError) as exc:
        return _fail("numerical", f"{type(exc).__name__}: {exc}")
    except ValueError as exc:
        return _fail("config", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort category
        log.debug("internal error", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
