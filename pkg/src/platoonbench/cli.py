"""Benchmark front end: JSON experiment matrices, run execution with paired
centralized baselines, CSV/JSON persistence, and plot-data emission.

Exit codes: 0 success, 1 at least one run failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .controllers import CONTROLLER_KINDS
from .mip import SolverOptions
from .mpc import MODEL_KINDS, NORM_KINDS
from .sim import SimResult, aggregate, make_task, run_simulation

__all__ = [
    "BenchmarkConfig",
    "ExperimentSpec",
    "RunSpec",
    "ConfigError",
    "parse_config",
    "canonical_config",
    "expand_matrix",
    "run_matrix",
    "emit_plot_data",
    "main",
]

ENV_OUTPUT = "PLATOONBENCH_OUTPUT"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    task: int
    controller: str
    model: str = "pwa"
    norm: str = "two"
    vehicles: tuple[int, ...] = (3,)
    horizons: tuple[int, ...] = (4,)
    seeds: tuple[int, ...] = (0,)
    leaders: tuple[int, ...] | None = None
    k_sim: int = 100
    iterations: int | None = None
    rho: float | None = None
    threshold: float | None = None
    solver: tuple[tuple[str, float], ...] = ()

    def controller_options(self) -> dict:
        out = {}
        if self.iterations is not None:
            out["iterations"] = self.iterations
        if self.rho is not None:
            out["rho"] = self.rho
        if self.threshold is not None:
            out["threshold"] = self.threshold
        return out

    def solver_options(self) -> SolverOptions:
        return SolverOptions(**dict(self.solver))


@dataclass(frozen=True)
class VehicleSpec:
    """Optional overrides for the physical constants and the gear table;
    every field defaults to the built-in dataset."""

    mu: float = 0.01
    drag: float = 0.5
    gravity: float = 9.8
    gears: tuple | None = None   # ((traction, v_low, v_high, polyline), ...)

    def gear_table(self):
        from .models import DEFAULT_GEARS, GearEntry, GearTable
        if self.gears is None:
            return DEFAULT_GEARS
        entries = []
        for traction, v_low, v_high, polyline in self.gears:
            entries.append(GearEntry(traction, v_low, v_high,
                                     tuple(tuple(p) for p in polyline)))
        return GearTable(tuple(entries))


@dataclass(frozen=True)
class BenchmarkConfig:
    experiments: tuple[ExperimentSpec, ...]
    output_dir: str = "benchmark_out"
    vehicle: VehicleSpec = VehicleSpec()


@dataclass(frozen=True)
class RunSpec:
    experiment: str
    task: int
    controller: str
    model: str
    norm: str
    m: int
    n: int
    seed: int
    leader: int
    k_sim: int
    controller_options: tuple[tuple[str, float], ...]
    solver: tuple[tuple[str, float], ...]
    is_baseline: bool = False

    @property
    def baseline_key(self):
        return (self.task, self.model, self.norm, self.m, self.n, self.seed,
                self.leader, self.k_sim, self.solver)

    @property
    def run_id(self) -> str:
        opts = "".join(f"_{k}{v:g}" for k, v in self.controller_options)
        return (f"task{self.task}_{self.controller}{opts}_{self.model}_"
                f"{self.norm}_M{self.m}_N{self.n}_l{self.leader}_"
                f"seed{self.seed}_k{self.k_sim}")


def _expect(cond: bool, path: str, message: str):
    if not cond:
        raise ConfigError(f"{path}: {message}")


def _as_int_list(value, path) -> tuple[int, ...]:
    _expect(isinstance(value, list) and value, path, "must be a nonempty list")
    for v in value:
        _expect(isinstance(v, int) and not isinstance(v, bool), path,
                "entries must be integers")
    return tuple(value)


def parse_config(text: str) -> BenchmarkConfig:
    """Parse and fully validate a JSON benchmark configuration; defaults are
    filled in so the canonical re-emission round-trips."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    _expect(isinstance(doc, dict), "$", "top level must be an object")
    known_top = {"experiments", "output_dir", "vehicle"}
    for key in doc:
        _expect(key in known_top, key, "unknown field")
    vehicle = _parse_vehicle(doc.get("vehicle"))
    exps = doc.get("experiments")
    _expect(isinstance(exps, list), "experiments", "must be a list")
    _expect(len(exps) > 0, "experiments", "no experiments")
    out = []
    seen_names = set()
    for idx, raw in enumerate(exps):
        path = f"experiments[{idx}]"
        _expect(isinstance(raw, dict), path, "must be an object")
        known = {"name", "task", "controller", "model", "norm", "vehicles",
                 "horizons", "seeds", "leaders", "k_sim", "iterations",
                 "rho", "threshold", "solver"}
        for key in raw:
            _expect(key in known, f"{path}.{key}", "unknown field")
        task = raw.get("task")
        _expect(task in (1, 2, 3), f"{path}.task", "must be 1, 2, or 3")
        controller = raw.get("controller")
        _expect(controller in CONTROLLER_KINDS, f"{path}.controller",
                f"must be one of {CONTROLLER_KINDS}")
        model = raw.get("model", "pwa")
        _expect(model in MODEL_KINDS, f"{path}.model",
                f"must be one of {MODEL_KINDS}")
        norm = raw.get("norm", "two")
        _expect(norm in NORM_KINDS, f"{path}.norm",
                f"must be one of {NORM_KINDS}")
        vehicles = _as_int_list(raw.get("vehicles", [3]), f"{path}.vehicles")
        _expect(all(m >= 1 for m in vehicles), f"{path}.vehicles",
                "vehicle counts must be positive")
        horizons = _as_int_list(raw.get("horizons", [4]), f"{path}.horizons")
        _expect(all(n >= 1 for n in horizons), f"{path}.horizons",
                "horizons must be positive")
        seeds = _as_int_list(raw.get("seeds", [0]), f"{path}.seeds")
        leaders = raw.get("leaders")
        if leaders is not None:
            leaders = _as_int_list(leaders, f"{path}.leaders")
            _expect(task == 3, f"{path}.leaders",
                    "only task 3 sweeps the leader")
            _expect(all(l >= 2 for l in leaders), f"{path}.leaders",
                    "the front vehicle cannot be a swept leader")
        k_sim = raw.get("k_sim", 100)
        _expect(isinstance(k_sim, int) and k_sim >= 1, f"{path}.k_sim",
                "must be a positive integer")
        iterations = raw.get("iterations")
        if iterations is not None:
            _expect(isinstance(iterations, int) and iterations >= 1,
                    f"{path}.iterations", "must be a positive integer")
        rho = raw.get("rho")
        if rho is not None:
            _expect(isinstance(rho, (int, float)) and rho > 0,
                    f"{path}.rho", "must be positive")
            rho = float(rho)
        threshold = raw.get("threshold")
        if threshold is not None:
            _expect(isinstance(threshold, (int, float)) and threshold >= 0,
                    f"{path}.threshold", "must be nonnegative")
            threshold = float(threshold)
        solver_raw = raw.get("solver", {})
        _expect(isinstance(solver_raw, dict), f"{path}.solver",
                "must be an object")
        solver_known = {"feas_tol", "int_tol", "rel_gap", "abs_gap",
                        "node_limit", "time_limit", "seed"}
        for key in solver_raw:
            _expect(key in solver_known, f"{path}.solver.{key}",
                    "unknown solver option")
        solver = tuple(sorted((k, v) for k, v in solver_raw.items()
                              if v is not None))
        try:
            SolverOptions(**dict(solver))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.solver: {exc}") from exc
        name = raw.get("name") or f"exp{idx}_{controller}_task{task}"
        _expect(name not in seen_names, f"{path}.name",
                "duplicate experiment name")
        seen_names.add(name)
        out.append(ExperimentSpec(
            name=name, task=task, controller=controller, model=model,
            norm=norm, vehicles=vehicles, horizons=horizons, seeds=seeds,
            leaders=leaders, k_sim=k_sim, iterations=iterations, rho=rho,
            threshold=threshold, solver=solver))
    output_dir = doc.get("output_dir", "benchmark_out")
    _expect(isinstance(output_dir, str) and output_dir, "output_dir",
            "must be a nonempty string")
    return BenchmarkConfig(experiments=tuple(out), output_dir=output_dir,
                           vehicle=vehicle)


def _parse_vehicle(raw) -> VehicleSpec:
    if raw is None:
        return VehicleSpec()
    _expect(isinstance(raw, dict), "vehicle", "must be an object")
    known = {"mu", "drag", "gravity", "gears"}
    for key in raw:
        _expect(key in known, f"vehicle.{key}", "unknown field")
    for key in ("mu", "drag", "gravity"):
        if key in raw:
            _expect(isinstance(raw[key], (int, float)), f"vehicle.{key}",
                    "must be a number")
    gears = raw.get("gears")
    if gears is not None:
        _expect(isinstance(gears, list) and gears, "vehicle.gears",
                "must be a nonempty list")
        packed = []
        for gi, entry in enumerate(gears):
            path = f"vehicle.gears[{gi}]"
            _expect(isinstance(entry, dict), path, "must be an object")
            for field_name in ("traction", "v_low", "v_high"):
                _expect(isinstance(entry.get(field_name), (int, float)),
                        f"{path}.{field_name}", "must be a number")
            polyline = entry.get("polyline") or [
                [entry["v_low"], entry["traction"]],
                [entry["v_high"], entry["traction"]]]
            _expect(isinstance(polyline, list) and len(polyline) >= 2,
                    f"{path}.polyline", "needs at least two (v, b) points")
            packed.append((float(entry["traction"]), float(entry["v_low"]),
                           float(entry["v_high"]),
                           tuple((float(v), float(b)) for v, b in polyline)))
        gears = tuple(packed)
    spec = VehicleSpec(mu=float(raw.get("mu", 0.01)),
                       drag=float(raw.get("drag", 0.5)),
                       gravity=float(raw.get("gravity", 9.8)), gears=gears)
    try:
        spec.gear_table()
    except ValueError as exc:
        raise ConfigError(f"vehicle.gears: {exc}") from exc
    return spec


def canonical_config(cfg: BenchmarkConfig) -> str:
    """Canonical JSON form (defaults materialized, keys sorted); parsing it
    reproduces the config exactly."""
    doc = {"output_dir": cfg.output_dir, "experiments": []}
    if cfg.vehicle != VehicleSpec():
        v = {"mu": cfg.vehicle.mu, "drag": cfg.vehicle.drag,
             "gravity": cfg.vehicle.gravity}
        if cfg.vehicle.gears is not None:
            v["gears"] = [
                {"traction": t, "v_low": lo, "v_high": hi,
                 "polyline": [list(p) for p in poly]}
                for t, lo, hi, poly in cfg.vehicle.gears]
        doc["vehicle"] = v
    for e in cfg.experiments:
        entry = {
            "name": e.name, "task": e.task, "controller": e.controller,
            "model": e.model, "norm": e.norm,
            "vehicles": list(e.vehicles), "horizons": list(e.horizons),
            "seeds": list(e.seeds), "k_sim": e.k_sim,
            "solver": dict(e.solver),
        }
        if e.leaders is not None:
            entry["leaders"] = list(e.leaders)
        for key in ("iterations", "rho", "threshold"):
            if getattr(e, key) is not None:
                entry[key] = getattr(e, key)
        doc["experiments"].append(entry)
    return json.dumps(doc, indent=2, sort_keys=True)


def expand_matrix(cfg: BenchmarkConfig) -> list[RunSpec]:
    """Cartesian expansion of every experiment plus deduplicated centralized
    baselines (scheduled first for the performance-drop pairing)."""
    runs: list[RunSpec] = []
    for e in cfg.experiments:
        for m in e.vehicles:
            leaders = (1,) if e.task != 3 else \
                (e.leaders or tuple(range(2, m + 1)))
            for n in e.horizons:
                for seed in e.seeds:
                    for leader in leaders:
                        if leader > m:
                            continue
                        runs.append(RunSpec(
                            experiment=e.name, task=e.task,
                            controller=e.controller, model=e.model,
                            norm=e.norm, m=m, n=n, seed=seed, leader=leader,
                            k_sim=e.k_sim,
                            controller_options=tuple(sorted(
                                e.controller_options().items())),
                            solver=e.solver))
    baselines: dict = {}
    for r in runs:
        if r.controller == "centralized":
            baselines.setdefault(r.baseline_key, None)
    extra = []
    have = {r.baseline_key for r in runs if r.controller == "centralized"}
    for r in runs:
        key = r.baseline_key
        if r.controller != "centralized" and key not in have:
            have.add(key)
            extra.append(RunSpec(
                experiment="__baseline__", task=r.task,
                controller="centralized", model=r.model, norm=r.norm,
                m=r.m, n=r.n, seed=r.seed, leader=r.leader, k_sim=r.k_sim,
                controller_options=(), solver=r.solver, is_baseline=True))
    ordered = sorted(extra, key=lambda r: r.run_id) + runs
    return ordered


def _execute_run(args: tuple[RunSpec, VehicleSpec]) -> SimResult:
    spec, vehicle = args
    task = make_task(spec.task, k_sim=spec.k_sim)
    return run_simulation(
        task, spec.controller, spec.m, spec.n, spec.seed,
        model=spec.model, norm=spec.norm, leader=spec.leader,
        controller_options=dict(spec.controller_options),
        solver_options=SolverOptions(**dict(spec.solver)),
        k_sim=spec.k_sim, gears=vehicle.gear_table(),
        mu=vehicle.mu, drag=vehicle.drag, gravity=vehicle.gravity)


def _summary_dict(spec: RunSpec, result: SimResult) -> dict:
    return {
        "run_id": spec.run_id,
        "experiment": spec.experiment,
        "task": spec.task,
        "controller": spec.controller,
        "controller_options": dict(spec.controller_options),
        "model": spec.model,
        "norm": spec.norm,
        "M": spec.m,
        "N": spec.n,
        "leader": spec.leader,
        "seed": spec.seed,
        "k_sim": spec.k_sim,
        "J": result.j,
        "delta_J": result.delta_j,
        "max_explored_nodes": result.n_no,
        "breaches": result.breaches,
        "messages": result.messages,
        "message_scalars": result.message_scalars,
        "steps_completed": result.steps_completed,
        "aborted": result.aborted,
        "timing": {
            "t_min": result.t_comp[0],
            "t_avg": result.t_comp[1],
            "t_max": result.t_comp[2],
            "wall_clock": result.wall_clock,
        },
    }


def _write_trace(path: str, result: SimResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "vehicle", "position", "velocity", "throttle",
                    "gear", "clamped", "ref_position", "ref_velocity"])
        K = result.steps_completed
        M = result.states.shape[1]
        for k in range(K + 1):
            for i in range(M):
                has_input = k < K
                w.writerow([
                    k, i + 1,
                    f"{result.states[k, i, 0]:.9g}",
                    f"{result.states[k, i, 1]:.9g}",
                    f"{result.throttles[k, i]:.9g}" if has_input else "",
                    int(result.gears[k, i]) if has_input else "",
                    int(result.clamps[k, i]) if has_input else "",
                    f"{result.reference[k, 0]:.9g}",
                    f"{result.reference[k, 1]:.9g}",
                ])


def run_matrix(cfg: BenchmarkConfig, workers: int = 1,
               seed_override: int | None = None, dry_run: bool = False,
               verbose: bool = False, output_dir: str | None = None) -> int:
    """Execute the expanded matrix, write per-run traces/summaries, the
    manifest, and per-experiment aggregates. Individual run failures are
    recorded and the matrix continues."""
    out_root = output_dir or os.environ.get(ENV_OUTPUT) or cfg.output_dir
    runs = expand_matrix(cfg)
    if seed_override is not None:
        runs = [RunSpec(**{**r.__dict__, "seed": seed_override})
                for r in runs]
        # re-deduplicate baselines that may now collide
        seen, unique = set(), []
        for r in runs:
            key = (r.run_id, r.experiment)
            if key not in seen:
                seen.add(key)
                unique.append(r)
        runs = unique
    print(f"expanded matrix: {len(runs)} runs "
          f"({sum(r.is_baseline for r in runs)} implicit baselines)")
    if dry_run:
        for r in runs:
            print(f"  {r.experiment}: {r.run_id}")
        return 0

    os.makedirs(os.path.join(out_root, "runs"), exist_ok=True)
    results: dict[str, tuple[RunSpec, SimResult | None]] = {}
    failures = 0
    jobs = [(r, cfg.vehicle) for r in runs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_execute_run, jobs))
    else:
        outcomes = []
        for job in jobs:
            if verbose:
                print(f"running {job[0].run_id} ({job[0].experiment})")
            outcomes.append(_execute_run(job))

    baseline_j: dict = {}
    for spec, result in zip(runs, outcomes):
        if spec.controller == "centralized" and not result.aborted:
            baseline_j.setdefault(spec.baseline_key, result.j)
    manifest = []
    for spec, result in zip(runs, outcomes):
        if spec.controller != "centralized" \
                and spec.baseline_key in baseline_j:
            result.delta_j = result.j - baseline_j[spec.baseline_key]
        elif spec.controller == "centralized":
            result.delta_j = 0.0
        if result.aborted:
            failures += 1
        summary = _summary_dict(spec, result)
        run_dir = os.path.join(out_root, "runs")
        with open(os.path.join(run_dir, f"{spec.run_id}_summary.json"),
                  "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
        _write_trace(os.path.join(run_dir, f"{spec.run_id}_trace.csv"),
                     result)
        manifest.append({"run_id": spec.run_id,
                         "experiment": spec.experiment,
                         "aborted": result.aborted})
        results.setdefault(spec.experiment, []).append((spec, result))

    with open(os.path.join(out_root, "manifest.json"), "w") as fh:
        json.dump({"runs": manifest, "count": len(manifest)}, fh, indent=2,
                  sort_keys=True)

    agg_rows = []
    for e in cfg.experiments:
        cells: dict = {}
        for spec, result in results.get(e.name, []):
            cells.setdefault((spec.m, spec.n), []).append(result)
        for (m, n), rs in sorted(cells.items()):
            agg = aggregate(rs)
            agg_rows.append({"experiment": e.name, "task": e.task,
                             "controller": e.controller, "model": e.model,
                             "norm": e.norm, "M": m, "N": n, **agg})
    with open(os.path.join(out_root, "aggregates.json"), "w") as fh:
        json.dump(agg_rows, fh, indent=2, sort_keys=True)
    if agg_rows:
        keys = sorted({k for row in agg_rows for k in row})
        with open(os.path.join(out_root, "aggregates.csv"), "w",
                  newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(agg_rows)
    print(f"wrote {len(manifest)} runs to {out_root} "
          f"({failures} failures)")
    return 1 if failures else 0


def emit_plot_data(out_root: str, kind: str) -> list[str]:
    """Plot-ready CSVs from completed runs.

    trajectory: per run, position/spacing/velocity time series with the safe
    distance as a column. sweep: per experiment, metrics vs the swept sizes,
    rows sorted by (M, N).
    """
    plots_dir = os.path.join(out_root, "plots")
    os.makedirs(plots_dir, exist_ok=True)
    written = []
    if kind == "trajectory":
        run_dir = os.path.join(out_root, "runs")
        if not os.path.isdir(run_dir):
            raise FileNotFoundError(f"no runs directory under {out_root}")
        for name in sorted(os.listdir(run_dir)):
            if not name.endswith("_trace.csv"):
                continue
            rows = list(csv.DictReader(open(os.path.join(run_dir, name))))
            if not rows:
                continue
            by_step: dict[int, dict[int, dict]] = {}
            for row in rows:
                by_step.setdefault(int(row["step"]), {})[
                    int(row["vehicle"])] = row
            vehicles = sorted({int(r["vehicle"]) for r in rows})
            out_path = os.path.join(plots_dir,
                                    name.replace("_trace.csv",
                                                 "_trajectory.csv"))
            with open(out_path, "w", newline="") as fh:
                w = csv.writer(fh)
                header = (["step"]
                          + [f"position_{i}" for i in vehicles]
                          + [f"spacing_{i - 1}_{i}" for i in vehicles[1:]]
                          + [f"velocity_{i}" for i in vehicles]
                          + ["ref_position", "ref_velocity", "d_safe"])
                w.writerow(header)
                for k in sorted(by_step):
                    cells = by_step[k]
                    pos = [float(cells[i]["position"]) for i in vehicles]
                    vel = [float(cells[i]["velocity"]) for i in vehicles]
                    spacing = [pos[j - 1] - pos[j]
                               for j in range(1, len(vehicles))]
                    w.writerow([k] + pos + spacing + vel
                               + [cells[vehicles[0]]["ref_position"],
                                  cells[vehicles[0]]["ref_velocity"], 25.0])
            written.append(out_path)
        return written
    if kind == "sweep":
        agg_path = os.path.join(out_root, "aggregates.json")
        if not os.path.isfile(agg_path):
            raise FileNotFoundError(f"{agg_path} missing; run the matrix "
                                    "first")
        rows = json.load(open(agg_path))
        by_exp: dict[str, list[dict]] = {}
        for row in rows:
            by_exp.setdefault(row["experiment"], []).append(row)
        for name, exp_rows in sorted(by_exp.items()):
            exp_rows.sort(key=lambda r: (r["M"], r["N"]))
            out_path = os.path.join(plots_dir, f"{name}_sweep.csv")
            keys = sorted({k for r in exp_rows for k in r})
            with open(out_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                w.writerows(exp_rows)
            written.append(out_path)
        return written
    raise ValueError("kind must be trajectory or sweep")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="platoonbench",
        description="Distributed hybrid MPC platooning benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute a benchmark matrix")
    run_p.add_argument("config", help="path to the JSON configuration")
    run_p.add_argument("--output", help="output directory (overrides config "
                                        f"and ${ENV_OUTPUT})")
    run_p.add_argument("--workers", type=int, default=1)
    run_p.add_argument("--seed-override", type=int, default=None)
    run_p.add_argument("--dry-run", action="store_true",
                       help="print the expanded matrix and exit")
    run_p.add_argument("-v", "--verbose", action="store_true")
    plots_p = sub.add_parser("plots", help="emit plot-ready CSV files")
    plots_p.add_argument("out_dir", help="matrix output directory")
    plots_p.add_argument("--kind", choices=("trajectory", "sweep"),
                         default="trajectory")
    args = parser.parse_args(argv)

    if args.command == "run":
        try:
            with open(args.config) as fh:
                cfg = parse_config(fh.read())
        except (OSError, ConfigError) as exc:
            print(f"configuration error: {exc}", file=sys.stderr)
            return 2
        return run_matrix(cfg, workers=args.workers,
                          seed_override=args.seed_override,
                          dry_run=args.dry_run, verbose=args.verbose,
                          output_dir=args.output)
    if args.command == "plots":
        try:
            written = emit_plot_data(args.out_dir, args.kind)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        for path in written:
            print(path)
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
