"""Closed-loop benchmark engine: tasks, reference generators, randomized
initial conditions, the mass-feasibility analysis, metrics, and aggregation.

The plant is always the continuous nonlinear hybrid model integrated with
RK4; prediction happens inside the controllers. A model-exact plant variant
(the prediction model itself) exists for consistency checks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import controllers as ctrl
from .mip import SolverOptions
from .mld import BoxBounds, mld_simulate
from .models import (
    DEFAULT_GEARS,
    GearTable,
    PwaFriction,
    State,
    VehicleParams,
    build_pwa_model,
    default_friction,
    nearest_valid_gear,
    plant_integrate,
    step_pwa,
    valid_gears,
)
from .mpc import (
    ConstantSpacing,
    PlatoonConfig,
    VelocityDependentSpacing,
    build_centralized,
    compile_models,
    encode_plans,
    evaluate_stage_cost,
)

__all__ = [
    "Task",
    "make_task",
    "SimResult",
    "sample_initial_conditions",
    "sample_masses",
    "reference_trajectory",
    "run_simulation",
    "tracking_cost",
    "open_loop_cost",
    "speed_hold_throttle",
    "feasibility_mass_bound",
    "report_mass_bounds",
    "REPORTED_MASS_BOUND_KG",
    "aggregate",
]


@dataclass(frozen=True)
class Task:
    """One benchmark scenario family."""

    task_id: int
    spacing: ConstantSpacing | VelocityDependentSpacing
    leader_rule: str            # "front" or "sweep"
    mass_rule: str              # "constant" or "uniform"
    reference_kind: str         # "constant" or "variable"
    k_sim: int = 100
    v_ref: float = 20.0

    def __post_init__(self):
        if self.leader_rule not in ("front", "sweep"):
            raise ValueError("leader_rule must be front or sweep")
        if self.mass_rule not in ("constant", "uniform"):
            raise ValueError("mass_rule must be constant or uniform")
        if self.reference_kind not in ("constant", "variable"):
            raise ValueError("reference_kind must be constant or variable")


def make_task(task_id: int, k_sim: int = 100) -> Task:
    """The three published scenarios: constant-speed homogeneous platooning,
    aggressive inhomogeneous platooning, and the same with an interior
    leader."""
    if task_id == 1:
        return Task(1, ConstantSpacing(50.0), "front", "constant",
                    "constant", k_sim)
    if task_id == 2:
        return Task(2, VelocityDependentSpacing(10.0, 3.0), "front",
                    "uniform", "variable", k_sim)
    if task_id == 3:
        return Task(3, VelocityDependentSpacing(10.0, 3.0), "sweep",
                    "uniform", "variable", k_sim)
    raise ValueError(f"unknown task {task_id}")


def sample_initial_conditions(n_vehicles: int, seed) -> list[State]:
    """Front vehicle at 0; gaps uniform on [60, 160] m; velocities uniform
    on [5, 35] m/s."""
    rng = np.random.default_rng(seed)
    gaps = rng.uniform(60.0, 160.0, size=max(n_vehicles - 1, 0))
    velocities = rng.uniform(5.0, 35.0, size=n_vehicles)
    positions = np.concatenate([[0.0], -np.cumsum(gaps)])
    return [State(float(p), float(v)) for p, v in zip(positions, velocities)]


def sample_masses(task: Task, n_vehicles: int, seed) -> tuple[float, ...]:
    if task.mass_rule == "constant":
        return tuple(800.0 for _ in range(n_vehicles))
    rng = np.random.default_rng(seed)
    return tuple(float(m) for m in rng.uniform(700.0, 1000.0,
                                               size=n_vehicles))


def reference_trajectory(task: Task, length: int, seed,
                         bounds: BoxBounds = BoxBounds(),
                         a_min: float = -2.0, a_max: float = 2.5,
                         dt: float = 1.0) -> np.ndarray:
    """(length, 2) reference starting at position 0.

    Constant kind holds v_ref. Variable kind concatenates seeded segments of
    10 to 20 steps with acceleration drawn from {a_min, 0, a_max} scaled by
    0.8, velocity clipped away from the box edges, position by trapezoidal
    integration.
    """
    out = np.zeros((length, 2))
    if task.reference_kind == "constant":
        out[:, 1] = task.v_ref
        out[:, 0] = np.arange(length) * task.v_ref * dt
        return out
    rng = np.random.default_rng(seed)
    v_lo, v_hi = bounds.v_min + 2.0, bounds.v_max - 2.0
    v = min(max(task.v_ref, v_lo), v_hi)
    p = 0.0
    out[0] = (p, v)
    k = 1
    while k < length:
        accel = 0.8 * rng.choice([a_min, 0.0, a_max])
        for _ in range(int(rng.integers(10, 21))):
            if k >= length:
                break
            v_next = min(max(v + accel * dt, v_lo), v_hi)
            p += 0.5 * (v + v_next) * dt
            v = v_next
            out[k] = (p, v)
            k += 1
    return out


@dataclass
class SimResult:
    """Closed-loop traces plus the benchmark metrics for one run."""

    states: np.ndarray          # (K+1, M, 2)
    throttles: np.ndarray       # (K, M)
    gears: np.ndarray           # (K, M)
    clamps: np.ndarray          # (K, M) bool, gear or traction clamping
    reference: np.ndarray       # (K+1, 2)
    j: float
    t_comp: tuple[float, float, float]
    n_no: int
    breaches: int
    messages: int
    message_scalars: int
    seed: int
    wall_clock: float
    steps_completed: int
    aborted: bool = False
    delta_j: float | None = None
    meta: dict = field(default_factory=dict)


_STEP_FUNCS = {
    "centralized": ctrl.centralized_step,
    "decentralized": ctrl.decentralized_step,
    "sequential": ctrl.sequential_step,
    "event": ctrl.event_based_step,
    "admm": ctrl.admm_step,
}


def _controller_kwargs(kind: str, options: dict) -> dict:
    if kind == "event":
        return {"iterations": options.get("iterations", 4),
                "threshold": options.get("threshold")}
    if kind == "admm":
        return {"iterations": options.get("iterations", 20),
                "rho": options.get("rho", 1.0)}
    return {}


def run_simulation(task: Task, controller: str, n_vehicles: int,
                   horizon: int, seed: int,
                   model: str = "pwa", norm: str = "two",
                   leader: int | None = None,
                   controller_options: dict | None = None,
                   solver_options: SolverOptions | None = None,
                   k_sim: int | None = None,
                   plant: str = "nonlinear",
                   gears: GearTable = DEFAULT_GEARS,
                   initial_states: list[State] | None = None,
                   masses: tuple[float, ...] | None = None,
                   mu: float = 0.01, drag: float = 0.5,
                   gravity: float = 9.8) -> SimResult:
    """Run one closed-loop benchmark instance.

    Measures plant states, asks the controller for first-move commands,
    applies them to the plant for one sampling period, and assembles the
    metric set at the end. Controller failures abort with partial traces.
    """
    if controller not in _STEP_FUNCS:
        raise ValueError(f"unknown controller {controller!r}")
    if plant not in ("nonlinear", "prediction"):
        raise ValueError("plant must be nonlinear or prediction")
    controller_options = controller_options or {}
    opts = solver_options or SolverOptions()
    K = task.k_sim if k_sim is None else k_sim

    ss = np.random.SeedSequence(entropy=(int(seed), task.task_id))
    seed_masses, seed_init, seed_ref = ss.spawn(3)
    if masses is None:
        masses = sample_masses(task, n_vehicles, seed_masses)
    init = initial_states if initial_states is not None \
        else sample_initial_conditions(n_vehicles, seed_init)
    if len(init) != n_vehicles or len(masses) != n_vehicles:
        raise ValueError("initial states and masses must match the "
                         "vehicle count")
    if leader is None:
        leader = 1
    if task.leader_rule == "front" and leader != 1:
        raise ValueError(f"task {task.task_id} fixes the leader to the "
                         "front vehicle")
    cfg = PlatoonConfig(n_vehicles=n_vehicles, horizon=horizon,
                        leader=leader, model=model, norm=norm,
                        spacing=task.spacing, masses=masses,
                        mu=mu, drag=drag, gravity=gravity)
    reference = reference_trajectory(task, K + horizon + 1, seed_ref,
                                     cfg.bounds, cfg.a_min, cfg.a_max,
                                     cfg.sample_time)
    bank = compile_models(cfg, gears)
    step_fn = _STEP_FUNCS[controller]
    kwargs = _controller_kwargs(controller, controller_options)
    bus = ctrl.CommBus()

    states_trace = np.zeros((K + 1, n_vehicles, 2))
    throttle_trace = np.zeros((K, n_vehicles))
    gear_trace = np.zeros((K, n_vehicles), dtype=int)
    clamp_trace = np.zeros((K, n_vehicles), dtype=bool)
    current = list(init)
    states_trace[0] = [(s.position, s.velocity) for s in current]

    t_wall0 = time.perf_counter()
    platoon_times = []
    n_no = 0
    cstate = None
    aborted = False
    steps_done = 0
    for k in range(K):
        window = reference[k:k + horizon + 1]
        try:
            out, cstate = step_fn(cfg, current, window, opts, cstate,
                                  bus=bus, bank=bank, **kwargs)
        except Exception:
            aborted = True
            break
        platoon_times.append(out.platoon_time)
        n_no = max(n_no, out.max_nodes)
        nxt = []
        for i in range(n_vehicles):
            u_cmd, gear_cmd = out.commands[i]
            gear_applied = nearest_valid_gear(gears, current[i].velocity,
                                              gear_cmd)
            clamped_gear = gear_applied != gear_cmd
            if plant == "nonlinear":
                s_next, clamped_traction = plant_integrate(
                    bank.params[i], gears, current[i], u_cmd, gear_applied,
                    cfg.sample_time)
            else:
                clamped_traction = False
                # solver states can sit a feasibility-tolerance hair outside
                # the velocity box, and world positions roam outside the
                # (translation-equivariant) position box; box both before
                # stepping and shift the position back afterwards
                offset = current[i].position - cfg.bounds.p_min - 1.0
                boxed = State(cfg.bounds.p_min + 1.0,
                              min(max(current[i].velocity,
                                      cfg.bounds.v_min), cfg.bounds.v_max))
                if model == "pwa":
                    s_next, _ = step_pwa(bank.pwa[i], boxed, u_cmd,
                                         cfg.sample_time)
                else:
                    s_next = mld_simulate(bank.mld[i], boxed, u_cmd,
                                          gear=gear_applied, tol=1e-6)
                s_next = State(s_next.position + offset, s_next.velocity)
            nxt.append(s_next)
            throttle_trace[k, i] = u_cmd
            gear_trace[k, i] = gear_applied
            clamp_trace[k, i] = clamped_gear or clamped_traction
        current = nxt
        states_trace[k + 1] = [(s.position, s.velocity) for s in current]
        steps_done = k + 1

    K_done = steps_done
    states_trace = states_trace[:K_done + 1]
    throttle_trace = throttle_trace[:K_done]
    gear_trace = gear_trace[:K_done]
    clamp_trace = clamp_trace[:K_done]
    ref_done = reference[:K_done + 1]

    j = tracking_cost(states_trace, throttle_trace, ref_done, cfg)
    breaches = count_breaches(states_trace, cfg.d_safe)
    if platoon_times:
        t_comp = (min(platoon_times), float(np.mean(platoon_times)),
                  max(platoon_times))
    else:
        t_comp = (0.0, 0.0, 0.0)
    return SimResult(
        states=states_trace, throttles=throttle_trace, gears=gear_trace,
        clamps=clamp_trace, reference=ref_done, j=j, t_comp=t_comp,
        n_no=n_no, breaches=breaches, messages=bus.total_messages,
        message_scalars=bus.total_scalars, seed=seed,
        wall_clock=time.perf_counter() - t_wall0,
        steps_completed=K_done, aborted=aborted,
        meta={"task": task.task_id, "controller": controller,
              "M": n_vehicles, "N": horizon, "model": model, "norm": norm,
              "leader": leader, "k_sim": K,
              "controller_options": dict(controller_options)})


def count_breaches(states: np.ndarray, d_safe: float) -> int:
    """Number of (step, adjacent pair) events with gap below d_safe."""
    gaps = states[:, :-1, 0] - states[:, 1:, 0]
    return int((gaps < d_safe).sum())


def tracking_cost(states: np.ndarray, throttles: np.ndarray,
                  reference: np.ndarray, cfg: PlatoonConfig) -> float:
    """Closed-loop tracking performance: leader error plus spacing errors at
    every recorded step plus effort for every applied input, under the
    configured norm and weights."""
    K = states.shape[0] - 1
    q_x = cfg.q_x_mat
    d0, t0 = cfg.spacing.coeffs()
    total = 0.0
    for k in range(K + 1):
        e = states[k, cfg.leader - 1] - reference[k]
        total += evaluate_stage_cost(cfg, cfg.norm, e, q_x)
        for i in range(1, states.shape[1]):
            front = states[k, i - 1]
            rear = states[k, i]
            gap = d0 + t0 * rear[1]
            err = np.array([front[0] - rear[0] - gap, front[1] - rear[1]])
            total += evaluate_stage_cost(cfg, cfg.norm, err, q_x)
    for k in range(K):
        for i in range(states.shape[1]):
            total += evaluate_stage_cost(cfg, cfg.norm,
                                         np.array([throttles[k, i]]),
                                         np.array([[cfg.q_u]]))
    return float(total)


def open_loop_cost(cfg: PlatoonConfig, states: list[State],
                   reference: np.ndarray, plans) -> tuple[float, float]:
    """Evaluate a set of per-vehicle plans in the centralized objective.

    Returns (objective, max safety slack); feasible-with-zero-slack plans
    bound the centralized optimum from above.
    """
    problem = build_centralized(cfg, states, reference)
    x = encode_plans(problem, plans)
    max_slack = 0.0
    for s, expr in problem.slack_defs:
        max_slack = max(max_slack, x[s])
    return problem.program.objective_value(x), max_slack


# ---------------------------------------------------------------------------
# Mass-feasibility analysis
# ---------------------------------------------------------------------------

REPORTED_MASS_BOUND_KG = 2.82   # quoted reference value; see README


def _best_plateau(model: str, gears: GearTable, pwa_regions, v: float) -> float:
    if model == "pwa":
        for reg in pwa_regions:
            if reg.v_lo <= v < reg.v_hi:
                return reg.traction
        return pwa_regions[-1].traction
    valid = valid_gears(gears, v)
    if not valid:
        raise ValueError(f"no valid gear at {v}")
    return max(gears.entry(j).traction for j in valid)


def speed_hold_throttle(friction: PwaFriction, traction: float, mass: float,
                        mu: float, g: float, scaling: str, v: float) -> float:
    """The speed-holding throttle under either reading of the discrete
    velocity update.

    "physical": traction gain divided by mass, u = (f + mu g m) / b.
    "literal": traction gain as printed in the feasibility analysis,
    u = (f/m + mu g) / b, which decreases with mass.
    """
    f = friction.eval(v)
    if scaling == "physical":
        return (f + mu * g * mass) / traction
    if scaling == "literal":
        return (f / mass + mu * g) / traction
    raise ValueError("scaling must be physical or literal")


def feasibility_mass_bound(model: str, params: VehicleParams,
                           friction: PwaFriction, gears: GearTable,
                           u_max: float = 1.0, reading: str = "grid",
                           grid_points: int = 10_000,
                           bounds: BoxBounds = BoxBounds()) -> float:
    """Minimum vehicle mass for which the feasibility analysis certifies a
    speed-holding throttle within limits at every viable velocity.

    reading "point": closed-form m >= f(v)/(b u_max - mu g) evaluated at the
    prescribed worst-case velocities (each region's top velocity for the PWA
    model; each gear's top velocity plus both friction-piece endpoints for
    the gear-input model) and maximized.

    reading "grid": bisection on the mass against a dense velocity-grid
    oracle that checks the speed-holding throttle (literal scaling, the only
    reading with an upward-closed feasible mass set on this dataset; the
    physical scaling admits no finite bound because drag exceeds the top
    gear's plateau near top speed, see README).
    """
    mu_g = params.mu * params.g
    pwa = build_pwa_model(params, gears, friction)
    if reading == "point":
        points: list[tuple[float, float]] = []
        if model == "pwa":
            for reg in pwa.regions:
                points.append((reg.traction, reg.v_hi))
        else:
            for j in range(1, gears.n_gears + 1):
                points.append((gears.entry(j).traction,
                               gears.entry(j).v_high))
            for v in (friction.alpha, bounds.v_max):
                for j in valid_gears(gears, v):
                    points.append((gears.entry(j).traction, v))
        return max(friction.eval(v) / (b * u_max - mu_g)
                   for b, v in points)
    if reading != "grid":
        raise ValueError("reading must be point or grid")
    grid = np.linspace(bounds.v_min, bounds.v_max, grid_points)
    tractions = np.array([_best_plateau(model, gears, pwa.regions, v)
                          for v in grid])
    fric = np.array([friction.eval(v) for v in grid])

    def holds(mass: float) -> bool:
        u = (fric / mass + mu_g) / tractions
        return bool(np.all(u <= u_max))

    lo, hi = 1e-9, 1e7
    if not holds(hi):
        return float("inf")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if holds(mid):
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-9 * max(1.0, hi):
            break
    return hi


def report_mass_bounds(params: VehicleParams | None = None,
                       gears: GearTable = DEFAULT_GEARS) -> dict:
    """All mass-bound readouts side by side; no equality is asserted between
    the computed values and the quoted reference."""
    params = params or VehicleParams()
    friction = default_friction(params)
    out = {"quoted_reference_kg": REPORTED_MASS_BOUND_KG}
    for model in ("pwa", "gear_input"):
        out[f"point_{model}_kg"] = feasibility_mass_bound(
            model, params, friction, gears, reading="point")
        out[f"grid_{model}_kg"] = feasibility_mass_bound(
            model, params, friction, gears, reading="grid")
    return out


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(results: list[SimResult]) -> dict:
    """Mean/std of J and (when present) of the drop vs the centralized
    baseline, pooled computation-time triple, peak node count, totals."""
    if not results:
        raise ValueError("nothing to aggregate")
    js = np.array([r.j for r in results])
    djs = np.array([r.delta_j for r in results if r.delta_j is not None])
    out = {
        "runs": len(results),
        "j_mean": float(js.mean()),
        "j_std": float(js.std()),
        "t_min": min(r.t_comp[0] for r in results),
        "t_avg": float(np.mean([r.t_comp[1] for r in results])),
        "t_max": max(r.t_comp[2] for r in results),
        "max_nodes": max(r.n_no for r in results),
        "total_breaches": int(sum(r.breaches for r in results)),
        "total_messages": int(sum(r.messages for r in results)),
        "aborted_runs": int(sum(r.aborted for r in results)),
    }
    if djs.size:
        out["dj_mean"] = float(djs.mean())
        out["dj_std"] = float(djs.std())
    return out
