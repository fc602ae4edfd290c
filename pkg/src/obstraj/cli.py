"""Command-line experiment driver.

    obstraj optimize --config exp.yaml --out out/
    obstraj evaluate out/trajectory.json --config exp.yaml --runs 10
    obstraj compare a.json b.json --config exp.yaml
    obstraj gramian out/trajectory.json --config exp.yaml
    obstraj generate figure8 --config exp.yaml

Exit codes: 0 ok, 1 runtime failure, 2 configuration error.  Errors are
printed to stderr as one JSON object.  Data files are deterministic for a
fixed config and seed; wall-clock timings go to separate ``*.timing.*``
sidecars.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import gpsimu, obsgram, optimizer, polytraj, simharness
from .config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
GENERATORS = ("figure8", "star", "random", "pl_random", "min_snap", "particular", "hover")

# yaw gyro bias first reaches the GPS output at fourth order when the lever arm
# belief is zero (specific force is parallel to body z)
STACK_ORDER = 4


class CommandError(RuntimeError):
    def __init__(self, message, kind="runtime", **detail):
        super().__init__(message)
        self.kind = kind
        self.detail = detail


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _load_trajectory(path) -> polytraj.PiecewisePolynomial:
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"trajectory file not found: {p}", "file_not_found", path=str(p))
    try:
        return polytraj.load(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CommandError(f"cannot read trajectory {p}: {exc}", "bad_trajectory", path=str(p)) from exc


def _require_feasible(pp, cfg: ExperimentConfig, name: str):
    mm = simharness.min_normalized_margin(pp, cfg.physical_limits(), cfg.optimizer.sample_dt)
    if mm < -1e-6:
        raise CommandError(f"trajectory {name} violates physical limits (worst normalized margin {mm:.4g})",
                           "infeasible", trajectory=name, worst_margin=mm)


def _sigma_min(pp, cfg: ExperimentConfig) -> float:
    traj = gpsimu.sampled_trajectory(pp, cfg.gramian_config().step)
    W = obsgram.approx_gramian(gpsimu.system_model(), traj, cfg.gramian_config())
    return obsgram.observability_measure(W, cfg.selection_indices())


def build_problem(cfg: ExperimentConfig) -> optimizer.OptProblem:
    space = cfg.trajectory_space()
    w0 = cfgmod.seed_weights(cfg, space)
    sel = cfg.selection_indices() if cfg.objective.kind != "min_snap" else ()
    spec = optimizer.ObjectiveSpec(cfg.objective.kind, tuple(sel), cfg.gramian_config(), cfg.noise_params())
    o = cfg.optimizer
    return optimizer.OptProblem(space, spec, cfg.physical_limits(), o.sample_dt, w0,
                                o.max_iter, o.step_tol, o.ftol)


# -- commands -------------------------------------------------------------

def cmd_optimize(cfg: ExperimentConfig, out: Path) -> dict:
    problem = build_problem(cfg)
    space = problem.space
    seed_pp = space.trajectory(problem.w0)
    try:
        res = optimizer.optimize(problem)
    except optimizer.InfeasibleProblemError as exc:
        raise CommandError(str(exc), "infeasible", worst_margin=exc.worst_margin) from exc
    final_pp = space.trajectory(res.weights)
    polytraj.save(seed_pp, out / "seed_trajectory.json")
    polytraj.save(final_pp, out / "trajectory.json")
    doc = res.to_dict()
    doc.pop("wall_time")
    doc["objective_kind"] = cfg.objective.kind
    doc["seed_weights"] = [float(w) for w in problem.w0]
    doc["weight_count"] = space.m
    doc["seed_snap"] = optimizer.snap_cost(seed_pp)
    doc["final_snap"] = optimizer.snap_cost(final_pp)
    if cfg.objective.kind != "min_snap":
        doc["selection"] = list(cfg.objective.selection)
        doc["seed_sigma_min"] = _sigma_min(seed_pp, cfg)
        doc["final_sigma_min"] = _sigma_min(final_pp, cfg)
    doc["final_min_margin"] = optimizer.raw_min_margin(problem, res.weights)
    _write(out / "result.json", _dump(doc))
    _write(out / "history.csv", _csv(["iteration", "objective", "violation"],
                                     [(i, f, v) for i, (f, v) in enumerate(zip(res.objective_history, res.violation_history))]))
    _write(out / "trajectory.timing.json", _dump({"wall_time_s": res.wall_time, "iterations": res.iterations}))
    _write(out / "config.yaml", cfgmod.dumps(cfg))
    return doc


def _evaluate(pp, cfg: ExperimentConfig, name: str):
    _require_feasible(pp, cfg, name)
    scenario = cfg.scenario_config()
    results = simharness.run_ensemble(pp, scenario, cfg.jobs)
    try:
        stats = simharness.aggregate(results)
    except simharness.AllRunsDivergedError as exc:
        raise CommandError(str(exc), "diverged", trajectory=name) from exc
    return results, stats


def cmd_evaluate(cfg: ExperimentConfig, traj_path, out: Path) -> dict:
    pp = _load_trajectory(traj_path)
    name = Path(traj_path).stem
    results, stats = _evaluate(pp, cfg, name)
    doc = stats.to_dict()
    doc["runs_requested"] = cfg.scenario.runs
    doc["seed"] = cfg.seed
    doc["trajectory"] = name
    _write(out / "stats.json", _dump(doc))
    _write(out / "rmse.csv", stats.rmse_csv())
    for r in results:
        _write(out / "runs" / f"run_{r.seed:06d}.csv", r.to_csv())
    return doc


def _runtime_of(traj_path: Path) -> float | str:
    side = traj_path.with_name(traj_path.stem + ".timing.json")
    if side.is_file():
        try:
            return float(json.loads(side.read_text())["wall_time_s"])
        except (KeyError, ValueError, json.JSONDecodeError):
            return ""
    return ""


def cmd_compare(cfg: ExperimentConfig, traj_paths, out: Path) -> list:
    if len(traj_paths) < 2:
        raise CommandError("compare needs at least two trajectories", "usage")
    rows = []
    names = []
    timing = []
    for path in traj_paths:
        p = Path(path)
        pp = _load_trajectory(p)
        name = p.parent.name + "/" + p.stem if p.stem in ("trajectory", "seed_trajectory") else p.stem
        names.append(name)
        _, stats = _evaluate(pp, cfg, name)
        timing.append([name, _runtime_of(p)])
        for b in simharness.BLOCK_NAMES:
            rows.append([name, b, stats.integrated_rmse[b], stats.final_rmse[b],
                         stats.integrated_mean[b], stats.integrated_std[b], stats.final_mean[b], stats.final_std[b],
                         stats.runs, stats.excluded])
    # rank by final RMSE per block (1 = best); ties keep input order
    by_block = {}
    for r in rows:
        by_block.setdefault(r[1], []).append(r)
    for group in by_block.values():
        for rank, r in enumerate(sorted(group, key=lambda r: r[3]), 1):
            r.append(rank)
    header = ["trajectory", "block", "integrated_rmse", "final_rmse", "integrated_mean", "integrated_std",
              "final_mean", "final_std", "runs", "excluded", "final_rank"]
    _write(out / "compare.csv", _csv(header, rows))
    # wall time is not reproducible, so it lives beside the table rather than in it
    _write(out / "compare.timing.csv", _csv(["trajectory", "optimization_runtime_s"], timing))
    return rows


def cmd_gramian(cfg: ExperimentConfig, traj_path, out: Path) -> dict:
    pp = _load_trajectory(traj_path)
    gcfg = cfg.gramian_config()
    model = gpsimu.system_model()
    traj = gpsimu.sampled_trajectory(pp, gcfg.step)
    g = obsgram.approx_gramian(model, traj, gcfg)
    doc = g.to_dict(cfg.selection_indices())
    stride = max(1, len(traj) // 30)
    stack = obsgram.lie_derivatives(model, traj.states[::stride], traj.inputs[::stride],
                                    max(gcfg.taylor_order, STACK_ORDER))
    rt = obsgram.rank_test(obsgram.observability_matrix(stack))
    doc["stacked_rank"] = rt["rank"]
    doc["stacked_observable"] = rt["observable"]
    doc["stacked_singular_values"] = [float(s) for s in rt["singular_values"]]
    _write(out / "gramian.json", _dump(doc))
    return doc


def cmd_generate(cfg: ExperimentConfig, kind: str, out: Path) -> dict:
    t = cfg.trajectory
    limits = cfg.physical_limits()
    if kind == "figure8":
        pp = simharness.gen_figure8(duration=t.duration, limits=limits)
    elif kind == "star":
        pp = simharness.gen_star(duration=t.duration, limits=limits)
    elif kind == "hover":
        pp = simharness.hover(t.duration, t.start)
    else:
        space = cfg.trajectory_space()
        sd = cfg.seed_trajectory
        seed = cfg.seed if sd.seed is None else sd.seed
        if kind == "random":
            w = simharness.random_weights(space, sd.scale, seed, limits, "plain")
        elif kind == "pl_random":
            w = simharness.random_weights(space, sd.scale, seed, limits, "physical_limit")
        elif kind == "min_snap":
            w = optimizer.min_snap_weights(space)
        else:
            w = np.zeros(space.m)
        pp = space.trajectory(w)
    mm = simharness.min_normalized_margin(pp, limits, cfg.optimizer.sample_dt)
    polytraj.save(pp, out / f"{kind}.json")
    return {"trajectory": kind, "min_normalized_margin": mm, "feasible": mm >= -1e-6}


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="obstraj", description="Observability-aware trajectory experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="base seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--runs", type=int, help="Monte Carlo run count (overrides config)")
    common.add_argument("--jobs", type=int, help="parallel worker processes (overrides config)")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("optimize", parents=[common], help="optimize a trajectory")
    p = sub.add_parser("evaluate", parents=[common], help="Monte Carlo evaluation of one trajectory")
    p.add_argument("trajectory")
    p = sub.add_parser("compare", parents=[common], help="rank several trajectories")
    p.add_argument("trajectories", nargs="+")
    p = sub.add_parser("gramian", parents=[common], help="Gramian and rank diagnostics")
    p.add_argument("trajectory")
    p = sub.add_parser("generate", parents=[common], help="write a baseline trajectory")
    p.add_argument("kind", choices=GENERATORS)
    return ap


def _fail(code: int, kind: str, message: str, out: Path | None = None, **detail) -> int:
    doc = {"error": kind, "message": message, **detail}
    text = json.dumps(doc, sort_keys=True, default=str)
    print(text, file=sys.stderr)
    if out is not None:
        try:
            _write(out / "error.json", text + "\n")
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.from_dict({})
        cfg = cfgmod.with_overrides(cfg, seed=args.seed, output=args.out, jobs=args.jobs, runs=args.runs)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), key=exc.key)
    out = Path(cfg.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "optimize":
            doc = cmd_optimize(cfg, out)
            summary = {k: doc[k] for k in ("objective", "initial_objective", "iterations") if k in doc}
        elif args.command == "evaluate":
            doc = cmd_evaluate(cfg, args.trajectory, out)
            summary = {"final_rmse": doc["final_rmse"], "excluded": doc["excluded"]}
        elif args.command == "compare":
            rows = cmd_compare(cfg, args.trajectories, out)
            summary = {"rows": len(rows), "table": str(out / "compare.csv")}
        elif args.command == "gramian":
            doc = cmd_gramian(cfg, args.trajectory, out)
            summary = {k: doc[k] for k in ("rank", "sigma_min", "stacked_rank") if k in doc}
        else:
            summary = cmd_generate(cfg, args.kind, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc), out, key=exc.key)
    except CommandError as exc:
        return _fail(EXIT_RUNTIME, exc.kind, str(exc), out, **exc.detail)
    except (simharness.RejectionSamplingError, simharness.TrajectoryFitError,
            obsgram.NumericalFailure, polytraj.InfeasibleConstraintsError, ValueError, OSError) as exc:
        return _fail(EXIT_RUNTIME, type(exc).__name__, str(exc), out)
    print(json.dumps(summary, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
