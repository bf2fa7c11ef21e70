"""The five platoon control strategies and the simulated communication bus.

Each step function consumes measured states plus a reference window and emits
per-vehicle first-move commands together with solver statistics and an
updated controller state (previous plans, ADMM duals). Communication happens
only through the CommBus so message counts are auditable.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .mip import SolverOptions, solve_bnb
from .models import State, nearest_valid_gear, steady_throttle, DEFAULT_GEARS
from .mpc import (
    AdmmTerms,
    ModelBank,
    MpcProblem,
    Plan,
    PlatoonConfig,
    build_centralized,
    build_local,
    build_neighborhood,
    compile_models,
    decode_copies,
    decode_plan,
    encode_plans,
)

__all__ = [
    "CommBus",
    "ControllerState",
    "SolveStats",
    "StepOutput",
    "shift_plan",
    "bootstrap_plan",
    "constant_velocity_trajectory",
    "centralized_step",
    "decentralized_step",
    "sequential_step",
    "event_based_step",
    "admm_step",
    "CONTROLLER_KINDS",
]

CONTROLLER_KINDS = ("centralized", "decentralized", "sequential", "event",
                    "admm")


@dataclass
class CommBus:
    """Message log plus per-edge counters; append-only within a run."""

    messages: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)

    def send(self, step: int, iteration: int, sender: int, receiver: int,
             kind: str, size: int):
        self.messages.append((step, iteration, sender, receiver, kind, size))
        cnt, tot = self.counters.get((sender, receiver), (0, 0))
        self.counters[(sender, receiver)] = (cnt + 1, tot + size)

    @property
    def total_messages(self) -> int:
        return len(self.messages)

    @property
    def total_scalars(self) -> int:
        return sum(m[5] for m in self.messages)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "iteration", "sender", "receiver",
                        "payload_kind", "payload_size"])
            w.writerows(self.messages)


class SolveStats:
    __slots__ = ("wall_time", "explored_nodes", "status", "objective")

    def __init__(self, wall_time, explored_nodes, status, objective):
        self.wall_time = wall_time
        self.explored_nodes = explored_nodes
        self.status = status
        self.objective = objective

    def __repr__(self):
        return (f"SolveStats(t={self.wall_time:.3f}, "
                f"nodes={self.explored_nodes}, {self.status})")


@dataclass
class ControllerState:
    """Carried between receding-horizon steps."""

    plans: dict[int, Plan] | None = None
    duals: dict = field(default_factory=dict)
    step_index: int = 0


@dataclass
class StepOutput:
    commands: list[tuple[float, int]]          # (throttle, gear) per vehicle
    plans: dict[int, Plan]
    per_vehicle: dict[int, list[SolveStats]]
    platoon_time: float
    iterations_used: int = 1
    diagnostics: dict = field(default_factory=dict)

    @property
    def max_nodes(self) -> int:
        return max((s.explored_nodes for stats in self.per_vehicle.values()
                    for s in stats), default=0)


# ---------------------------------------------------------------------------
# Plan bookkeeping
# ---------------------------------------------------------------------------

def shift_plan(plan: Plan, dt: float, gears=DEFAULT_GEARS) -> Plan:
    """Advance a plan one step: drop step 0, extend the tail at constant
    velocity (position advances v*dt), repeat the last input, and re-validate
    every gear at its step's velocity."""
    last = plan.states[-1]
    tail = np.array([[last[0] + last[1] * dt, last[1]]])
    states = np.vstack([plan.states[1:], tail])
    throttles = np.append(plan.throttles[1:], plan.throttles[-1])
    gears_arr = np.append(plan.gears[1:], plan.gears[-1])
    gears_arr = np.array([nearest_valid_gear(gears, states[k, 1],
                                             int(gears_arr[k]))
                          for k in range(len(gears_arr))])
    slacks = np.append(plan.slacks[1:], 0.0)
    return Plan(states=states, throttles=throttles, gears=gears_arr,
                slacks=slacks, objective=float("nan"))


def constant_velocity_trajectory(state: State, horizon: int,
                                 dt: float) -> np.ndarray:
    """(N+1, 2) extrapolation of a measured state at constant velocity."""
    ks = np.arange(horizon + 1)
    return np.column_stack([state.position + ks * dt * state.velocity,
                            np.full(horizon + 1, state.velocity)])


def bootstrap_plan(cfg: PlatoonConfig, bank: ModelBank, i: int,
                   state: State) -> Plan:
    """Measurement-based base plan: hold the current velocity."""
    states = constant_velocity_trajectory(state, cfg.horizon, cfg.sample_time)
    pwa = bank.pwa_for(i)
    v = min(max(state.velocity, cfg.bounds.v_min), cfg.bounds.v_max)
    u = float(np.clip(steady_throttle(pwa, v), -cfg.bounds.u_max,
                      cfg.bounds.u_max))
    gear = pwa.implied_gear(v)
    return Plan(states=states,
                throttles=np.full(cfg.horizon, u),
                gears=np.full(cfg.horizon, gear, dtype=int),
                slacks=np.zeros(cfg.horizon), objective=float("nan"))


def _shifted_or_bootstrap(cfg, bank, prev: ControllerState | None,
                          states: list[State]) -> dict[int, Plan]:
    if prev is not None and prev.plans:
        return {i: shift_plan(prev.plans[i], cfg.sample_time)
                for i in prev.plans}
    return {i: bootstrap_plan(cfg, bank, i, states[i - 1])
            for i in range(1, cfg.n_vehicles + 1)}


def _solve(problem: MpcProblem, opts: SolverOptions,
           hint_plans: dict[int, Plan] | None = None,
           hint_copies=None):
    hint = None
    if hint_plans is not None:
        try:
            hint = encode_plans(problem, hint_plans, hint_copies)
        except (ValueError, KeyError, StopIteration):
            hint = None
    t0 = time.perf_counter()
    res = solve_bnb(problem.program, opts, incumbent_hint=hint)
    wall = time.perf_counter() - t0
    if res.status not in ("optimal", "node-limit", "time-limit") \
            or res.x is None:
        raise RuntimeError(f"controller subproblem ended {res.status}")
    return res, SolveStats(wall, res.explored_nodes, res.status,
                           res.objective)


def _first_commands(cfg, plans: dict[int, Plan]) -> list[tuple[float, int]]:
    out = []
    for i in range(1, cfg.n_vehicles + 1):
        p = plans[i]
        out.append((float(np.clip(p.throttles[0], -cfg.bounds.u_max,
                                  cfg.bounds.u_max)), int(p.gears[0])))
    return out


# ---------------------------------------------------------------------------
# Controllers
# ---------------------------------------------------------------------------

def centralized_step(cfg: PlatoonConfig, states: list[State],
                     reference: np.ndarray,
                     opts: SolverOptions | None = None,
                     prev: ControllerState | None = None,
                     bus: CommBus | None = None,
                     bank: ModelBank | None = None):
    """Solve the global problem once; no communication."""
    opts = opts or SolverOptions()
    bank = bank or compile_models(cfg)
    problem = build_centralized(cfg, states, reference, bank)
    hint = _shifted_or_bootstrap(cfg, bank, prev, states) \
        if prev is not None else None
    res, stats = _solve(problem, opts, hint)
    plans = decode_plan(problem, res.x, opts.int_tol * 10)
    out = StepOutput(commands=_first_commands(cfg, plans), plans=plans,
                     per_vehicle={0: [stats]}, platoon_time=stats.wall_time,
                     diagnostics={"objective": res.objective})
    state = ControllerState(plans=plans,
                            step_index=(prev.step_index + 1) if prev else 1)
    return out, state


def decentralized_step(cfg: PlatoonConfig, states: list[State],
                       reference: np.ndarray,
                       opts: SolverOptions | None = None,
                       prev: ControllerState | None = None,
                       bus: CommBus | None = None,
                       bank: ModelBank | None = None):
    """Local problems in parallel against constant-velocity extrapolations of
    measured neighbors; zero communication."""
    opts = opts or SolverOptions()
    bank = bank or compile_models(cfg)
    M, dt = cfg.n_vehicles, cfg.sample_time
    hint = _shifted_or_bootstrap(cfg, bank, prev, states) \
        if prev is not None else None
    plans: dict[int, Plan] = {}
    per_vehicle = {}
    for i in range(1, M + 1):
        front = constant_velocity_trajectory(states[i - 2], cfg.horizon, dt) \
            if i > 1 else None
        rear = constant_velocity_trajectory(states[i], cfg.horizon, dt) \
            if i < M else None
        problem = build_local(cfg, i, states[i - 1], front, rear,
                              reference if i == cfg.leader else None,
                              bank=bank)
        res, stats = _solve(problem, opts,
                            {i: hint[i]} if hint is not None else None)
        plans[i] = decode_plan(problem, res.x, opts.int_tol * 10)[i]
        per_vehicle[i] = [stats]
    platoon_time = max(s[0].wall_time for s in per_vehicle.values())
    out = StepOutput(commands=_first_commands(cfg, plans), plans=plans,
                     per_vehicle=per_vehicle, platoon_time=platoon_time)
    state = ControllerState(plans=plans,
                            step_index=(prev.step_index + 1) if prev else 1)
    return out, state


def _sequence_order(leader: int, n: int) -> list[int]:
    order = [leader]
    for rank in range(1, n):
        for j in (leader - rank, leader + rank):
            if 1 <= j <= n:
                order.append(j)
    return order


def sequential_step(cfg: PlatoonConfig, states: list[State],
                    reference: np.ndarray,
                    opts: SolverOptions | None = None,
                    prev: ControllerState | None = None,
                    bus: CommBus | None = None,
                    bank: ModelBank | None = None):
    """Leader first, then outward rank by rank; vehicles closer to the leader
    supply fresh trajectories, the others enter as shifted previous plans."""
    opts = opts or SolverOptions()
    bank = bank or compile_models(cfg)
    M, dt = cfg.n_vehicles, cfg.sample_time
    step_idx = prev.step_index if prev else 0
    base = _shifted_or_bootstrap(cfg, bank, prev, states)
    order = _sequence_order(cfg.leader, M)
    ranks = {v: abs(v - cfg.leader) for v in order}
    fresh: dict[int, np.ndarray] = {}
    plans: dict[int, Plan] = {}
    per_vehicle = {}
    for i in order:
        def x_bar(j):
            if j in fresh:
                return fresh[j]
            return base[j].states
        front = x_bar(i - 1) if i > 1 else None
        rear = x_bar(i + 1) if i < M else None
        problem = build_local(cfg, i, states[i - 1], front, rear,
                              reference if i == cfg.leader else None,
                              bank=bank)
        res, stats = _solve(problem, opts, {i: base[i]})
        plan = decode_plan(problem, res.x, opts.int_tol * 10)[i]
        plans[i] = plan
        fresh[i] = plan.states
        per_vehicle[i] = [stats]
        if bus is not None:
            size = plan.states.size
            for j in (i - 1, i + 1):
                if 1 <= j <= M:
                    bus.send(step_idx, 0, i, j, "predicted-trajectory", size)
    left = sum(per_vehicle[j][0].wall_time
               for j in order if j <= cfg.leader)
    right = sum(per_vehicle[j][0].wall_time
                for j in order if j >= cfg.leader)
    out = StepOutput(commands=_first_commands(cfg, plans), plans=plans,
                     per_vehicle=per_vehicle,
                     platoon_time=max(left, right),
                     diagnostics={"order": order, "ranks": ranks})
    state = ControllerState(plans=plans, step_index=step_idx + 1)
    return out, state


def _neighborhood_objective(problem: MpcProblem, plans: dict[int, Plan],
                            members) -> float:
    x = encode_plans(problem, {j: plans[j] for j in members})
    return problem.program.objective_value(x)


def event_based_step(cfg: PlatoonConfig, states: list[State],
                     reference: np.ndarray,
                     opts: SolverOptions | None = None,
                     prev: ControllerState | None = None,
                     iterations: int = 4,
                     threshold: float | None = None,
                     bus: CommBus | None = None,
                     bank: ModelBank | None = None):
    """Parallel enlarged-neighborhood solves with event-triggered broadcast:
    the vehicle with the largest cost improvement over the base plans (if it
    clears the threshold) overwrites its neighborhood's base plans."""
    opts = opts or SolverOptions()
    bank = bank or compile_models(cfg)
    M = cfg.n_vehicles
    step_idx = prev.step_index if prev else 0
    base = _shifted_or_bootstrap(cfg, bank, prev, states)
    if threshold is None:
        cprob = build_centralized(cfg, states, reference, bank)
        base_cost = cprob.program.objective_value(encode_plans(cprob, base))
        threshold = 1e-3 * (1.0 + abs(base_cost))
    per_vehicle = {i: [] for i in range(1, M + 1)}
    platoon_time = 0.0
    events = 0
    iterations_used = 0
    for it in range(1, iterations + 1):
        iterations_used = it
        best_gain, best_vehicle, best_plans = 0.0, None, None
        iter_walls = []
        for i in range(1, M + 1):
            members = [j for j in (i - 1, i, i + 1) if 1 <= j <= M]
            boundary = {}
            lo, hi = members[0], members[-1]
            if lo - 1 >= 1:
                boundary[lo - 1] = base[lo - 1].states
            if hi + 1 <= M:
                boundary[hi + 1] = base[hi + 1].states
            problem = build_neighborhood(
                cfg, i, {j: states[j - 1] for j in members}, boundary,
                reference, bank)
            res, stats = _solve(problem, opts, {j: base[j] for j in members})
            per_vehicle[i].append(stats)
            iter_walls.append(stats.wall_time)
            base_obj = _neighborhood_objective(problem, base, members)
            gain = base_obj - res.objective
            if gain > best_gain + 1e-12:
                best_gain = gain
                best_vehicle = i
                best_plans = decode_plan(problem, res.x, opts.int_tol * 10)
        platoon_time += max(iter_walls)
        if best_vehicle is None or best_gain < threshold:
            break
        events += 1
        for j, plan in best_plans.items():
            base[j] = plan
        if bus is not None:
            for j in (best_vehicle - 1, best_vehicle + 1):
                if 1 <= j <= M:
                    size = best_plans[j].states.size \
                        + best_plans[j].throttles.size
                    bus.send(step_idx, it, best_vehicle, j,
                             "neighborhood-update", size)
            for j in (best_vehicle - 2, best_vehicle + 2):
                if 1 <= j <= M:
                    nbr = best_vehicle - 1 if j < best_vehicle \
                        else best_vehicle + 1
                    bus.send(step_idx, it, best_vehicle, j, "base-refresh",
                             best_plans[nbr].states.size)
    out = StepOutput(commands=_first_commands(cfg, base), plans=base,
                     per_vehicle=per_vehicle, platoon_time=platoon_time,
                     iterations_used=iterations_used,
                     diagnostics={"events": events, "threshold": threshold})
    state = ControllerState(plans=base, step_index=step_idx + 1)
    return out, state


def _pair_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def admm_step(cfg: PlatoonConfig, states: list[State],
              reference: np.ndarray,
              opts: SolverOptions | None = None,
              prev: ControllerState | None = None,
              iterations: int = 20,
              rho: float = 1.0,
              bus: CommBus | None = None,
              bank: ModelBank | None = None,
              fixed_binaries: dict[int, np.ndarray] | None = None):
    """Consensus ADMM over coupled state trajectories: per iteration every
    vehicle solves its augmented local MIQP in parallel, adjacent pairs
    average their two copies of each shared trajectory, and duals ascend.
    Non-convergence is logged, never fatal.

    `fixed_binaries` pins each vehicle's (horizon, n_delta) binary block,
    turning the local solves into convex QPs (the convex-restriction
    analysis mode).
    """
    opts = opts or SolverOptions()
    bank = bank or compile_models(cfg)
    M, N, dt = cfg.n_vehicles, cfg.horizon, cfg.sample_time
    step_idx = prev.step_index if prev else 0
    base = _shifted_or_bootstrap(cfg, bank, prev, states)

    pairs = [(i, i + 1) for i in range(1, M)]
    zeros = np.zeros((N + 1, 2))

    def dual_key(pair, traj, role):
        return (pair, traj, role)

    duals = {}
    for p in pairs:
        a, b = p
        for traj in (a, b):
            for role in ("own", "copy"):
                key = dual_key(p, traj, role)
                if prev is not None and key in prev.duals:
                    d = prev.duals[key]
                    duals[key] = np.vstack([d[1:], d[-1:]])
                else:
                    duals[key] = zeros.copy()

    consensus = {p: {p[0]: base[p[0]].states.copy(),
                     p[1]: base[p[1]].states.copy()} for p in pairs}
    for p in pairs:
        for j in p:
            # step 0 of every copy is pinned to the measurement, so keep the
            # consensus consistent with it
            consensus[p][j][0] = (states[j - 1].position,
                                  states[j - 1].velocity)

    plans = {i: base[i] for i in range(1, M + 1)}
    per_vehicle = {i: [] for i in range(1, M + 1)}
    platoon_time = 0.0
    residual = float("nan")
    last_copies: dict[int, dict[int, np.ndarray]] = {}
    for it in range(1, iterations + 1):
        iter_walls = []
        new_plansroles = {}
        for i in range(1, M + 1):
            front_pair = _pair_key(i - 1, i) if i > 1 else None
            rear_pair = _pair_key(i, i + 1) if i < M else None
            admm = None
            front = rear = None
            if front_pair or rear_pair:
                admm = AdmmTerms(
                    rho=rho,
                    own_front_consensus=consensus[front_pair][i]
                    if front_pair else None,
                    own_front_dual=duals[dual_key(front_pair, i, "own")]
                    if front_pair else None,
                    own_rear_consensus=consensus[rear_pair][i]
                    if rear_pair else None,
                    own_rear_dual=duals[dual_key(rear_pair, i, "own")]
                    if rear_pair else None,
                    copy_front_dual=duals[dual_key(front_pair, i - 1, "copy")]
                    if front_pair else None,
                    copy_rear_dual=duals[dual_key(rear_pair, i + 1, "copy")]
                    if rear_pair else None)
                front = consensus[front_pair][i - 1] if front_pair else None
                rear = consensus[rear_pair][i + 1] if rear_pair else None
            problem = build_local(cfg, i, states[i - 1], front, rear,
                                  reference if i == cfg.leader else None,
                                  admm=admm, bank=bank)
            if fixed_binaries is not None and i in fixed_binaries:
                idx = problem.varmap.delta[i].ravel()
                vals = np.asarray(fixed_binaries[i], dtype=float).ravel()
                problem.program.lb[idx] = vals
                problem.program.ub[idx] = vals
            hint_copies = None
            if admm is not None:
                hint_copies = {}
                if front_pair:
                    hint_copies[i - 1] = consensus[front_pair][i - 1]
                if rear_pair:
                    hint_copies[i + 1] = consensus[rear_pair][i + 1]
            res, stats = _solve(problem, opts, {i: plans[i]}, hint_copies)
            per_vehicle[i].append(stats)
            iter_walls.append(stats.wall_time)
            new_plansroles[i] = (decode_plan(problem, res.x,
                                             opts.int_tol * 10)[i],
                                 decode_copies(problem, res.x))
        platoon_time += max(iter_walls)
        plans = {i: pr[0] for i, pr in new_plansroles.items()}
        last_copies = {i: pr[1] for i, pr in new_plansroles.items()}
        if not pairs:
            break          # single vehicle: nothing to negotiate
        if bus is not None:
            for (a, b) in pairs:
                size = plans[a].states.size * 2
                bus.send(step_idx, it, a, b, "admm-trajectories", size)
                bus.send(step_idx, it, b, a, "admm-trajectories", size)
        residual = 0.0
        for p in pairs:
            a, b = p
            za = 0.5 * (plans[a].states + last_copies[b][a])
            zb = 0.5 * (plans[b].states + last_copies[a][b])
            consensus[p][a] = za
            consensus[p][b] = zb
            duals[dual_key(p, a, "own")] += rho * (plans[a].states - za)
            duals[dual_key(p, a, "copy")] += rho * (last_copies[b][a] - za)
            duals[dual_key(p, b, "own")] += rho * (plans[b].states - zb)
            duals[dual_key(p, b, "copy")] += rho * (last_copies[a][b] - zb)
            residual = max(residual,
                           float(np.abs(plans[a].states - za).max()),
                           float(np.abs(last_copies[b][a] - za).max()),
                           float(np.abs(plans[b].states - zb).max()),
                           float(np.abs(last_copies[a][b] - zb).max()))
    out = StepOutput(commands=_first_commands(cfg, plans), plans=plans,
                     per_vehicle=per_vehicle, platoon_time=platoon_time,
                     iterations_used=iterations if pairs else 1,
                     diagnostics={"primal_residual": residual, "rho": rho})
    state = ControllerState(plans=plans, duals=duals,
                            step_index=step_idx + 1)
    return out, state
