"""Mixed-logical-dynamical compilation of both hybrid vehicle models.

Either model becomes linear dynamics over (state, throttle, one-hot binaries,
gated auxiliaries) plus a big-M inequality block:

    x+ = A x + B_u u + B_d delta + B_z z + f0
    E_x x + E_u u + E_d delta + E_z z <= e

Every auxiliary z_i is the product of one binary ("gate") with an affine
expression of (x, u); the standard four-inequality envelope makes the product
exact because the gate is binary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import (
    GearTable,
    PwaFriction,
    PwaModel,
    State,
    VehicleParams,
    V_MAX,
    V_MIN,
    valid_gears,
)

__all__ = [
    "BoxBounds",
    "MldSystem",
    "big_m_bounds",
    "build_mld_pwa",
    "build_mld_gear_input",
    "mld_simulate",
    "format_constraints",
]


@dataclass(frozen=True)
class BoxBounds:
    """State/input box required by the conversion (all intervals finite)."""

    p_min: float = 0.0
    p_max: float = 10000.0
    v_min: float = V_MIN
    v_max: float = V_MAX
    u_max: float = 1.0

    def __post_init__(self):
        for lo, hi, name in ((self.p_min, self.p_max, "position"),
                             (self.v_min, self.v_max, "velocity"),
                             (-self.u_max, self.u_max, "throttle")):
            if not lo < hi:
                raise ValueError(f"{name} interval [{lo}, {hi}] is empty")
            if not (np.isfinite(lo) and np.isfinite(hi)):
                raise ValueError(f"{name} interval must be finite for big-M "
                                 "constants")


@dataclass(frozen=True)
class MldSystem:
    """Compiled per-step mixed-integer dynamics of one vehicle.

    `labels` names each binary ("region", r) / ("gear", j) / ("fric", i);
    `intervals` gives the velocity interval each binary asserts; `gate`,
    `G_x`, `G_u`, `G_0` define the gated expression behind each auxiliary:
    z_i = delta[gate[i]] * (G_x[i] @ x + G_u[i] @ u + G_0[i]).
    """

    kind: str                      # "pwa" or "gear_input"
    n_x: int
    n_u: int
    n_delta: int
    n_z: int
    A: np.ndarray
    B_u: np.ndarray
    B_delta: np.ndarray
    B_z: np.ndarray
    f0: np.ndarray
    E_x: np.ndarray
    E_u: np.ndarray
    E_delta: np.ndarray
    E_z: np.ndarray
    e: np.ndarray
    labels: tuple[tuple[str, int], ...]
    intervals: tuple[tuple[float, float], ...]
    gate: tuple[int, ...]
    G_x: np.ndarray
    G_u: np.ndarray
    G_0: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray
    bounds: BoxBounds
    sample_time: float
    row_names: tuple[str, ...] = field(default=(), repr=False)

    def step(self, x: np.ndarray, u: np.ndarray, delta: np.ndarray,
             z: np.ndarray) -> np.ndarray:
        return (self.A @ x + self.B_u @ u + self.B_delta @ delta
                + self.B_z @ z + self.f0)

    def constraint_residual(self, x, u, delta, z) -> np.ndarray:
        """lhs - rhs of the inequality block (feasible iff all <= 0)."""
        lhs = (self.E_x @ x + self.E_u @ u + self.E_delta @ delta
               + self.E_z @ z)
        return lhs - self.e


def big_m_bounds(gears: GearTable, bounds: BoxBounds) -> tuple[np.ndarray, np.ndarray]:
    """Tightest per-gear big-M constants for the gear-validity implications.

    M_H[j] bounds x2 - v_high[j] over the box, M_L[j] bounds v_low[j] - x2,
    both clamped below at zero.
    """
    m_h = np.array([max(bounds.v_max - g.v_high, 0.0) for g in gears.gears])
    m_l = np.array([max(g.v_low - bounds.v_min, 0.0) for g in gears.gears])
    return m_h, m_l


class _Builder:
    """Accumulates inequality rows for one MldSystem."""

    def __init__(self, n_x, n_u, n_delta, n_z):
        self.E_x, self.E_u, self.E_d, self.E_z = [], [], [], []
        self.e, self.names = [], []
        self.dims = (n_x, n_u, n_delta, n_z)

    def row(self, name, rhs, x=None, u=None, d=None, z=None):
        n_x, n_u, n_d, n_z = self.dims

        def fill(vals, n):
            out = np.zeros(n)
            if vals:
                for i, v in vals.items():
                    out[i] = v
            return out

        self.E_x.append(fill(x, n_x))
        self.E_u.append(fill(u, n_u))
        self.E_d.append(fill(d, n_d))
        self.E_z.append(fill(z, n_z))
        self.e.append(rhs)
        self.names.append(name)

    def blocks(self):
        return (np.array(self.E_x), np.array(self.E_u), np.array(self.E_d),
                np.array(self.E_z), np.array(self.e), tuple(self.names))


def _envelope(bd: _Builder, zi: int, gate: int, gx: np.ndarray, gu: np.ndarray,
              g0: float, lo: float, hi: float, tag: str):
    """Four-row exact envelope for z = delta * expr with expr in [lo, hi]."""
    x = {0: gx[0], 1: gx[1]}
    u = {0: gu[0]}
    bd.row(f"{tag}:ub_gate", 0.0, d={gate: -hi}, z={zi: 1.0})
    bd.row(f"{tag}:lb_gate", 0.0, d={gate: lo}, z={zi: -1.0})
    bd.row(f"{tag}:ub_expr", g0 - lo,
           x={k: -v for k, v in x.items()}, u={0: -gu[0]},
           d={gate: -lo}, z={zi: 1.0})
    bd.row(f"{tag}:lb_expr", -g0 + hi, x=x, u=u, d={gate: hi}, z={zi: -1.0})


def _expr_range(gx, gu, g0, bounds: BoxBounds) -> tuple[float, float]:
    """Interval of gx@x + gu@u + g0 over the box."""
    lo = hi = g0
    for coef, (a, b) in ((gx[0], (bounds.p_min, bounds.p_max)),
                         (gx[1], (bounds.v_min, bounds.v_max)),
                         (gu[0], (-bounds.u_max, bounds.u_max))):
        lo += coef * (a if coef >= 0 else b)
        hi += coef * (b if coef >= 0 else a)
    return lo, hi


def _membership(bd: _Builder, gate: int, lo: float, hi: float,
                bounds: BoxBounds, tag: str):
    """delta = 1 implies lo <= x2 <= hi, via box-derived big-M constants."""
    m_hi = max(bounds.v_max - hi, 0.0)
    m_lo = max(lo - bounds.v_min, 0.0)
    bd.row(f"{tag}:v_hi", hi + m_hi, x={1: 1.0}, d={gate: m_hi})
    bd.row(f"{tag}:v_lo", -lo + m_lo, x={1: -1.0}, d={gate: m_lo})


def _one_hot(bd: _Builder, gates: list[int], tag: str):
    bd.row(f"{tag}:sum_ub", 1.0, d={g: 1.0 for g in gates})
    bd.row(f"{tag}:sum_lb", -1.0, d={g: -1.0 for g in gates})


def _finish(kind, bd, n_delta, n_z, A, f0, B_z_rows, labels, intervals,
            gate, G_x, G_u, G_0, bounds, T) -> MldSystem:
    E_x, E_u, E_d, E_z, e, names = bd.blocks()
    G_x = np.array(G_x)
    G_u = np.array(G_u)
    G_0 = np.array(G_0)
    ranges = [_expr_range(G_x[i], G_u[i], G_0[i], bounds) for i in range(n_z)]
    z_lo = np.array([min(lo, 0.0) for lo, _ in ranges])
    z_hi = np.array([max(hi, 0.0) for _, hi in ranges])
    return MldSystem(
        kind=kind, n_x=2, n_u=1, n_delta=n_delta, n_z=n_z,
        A=np.array(A),
        B_u=np.zeros((2, 1)),
        B_delta=np.zeros((2, n_delta)),
        B_z=np.array(B_z_rows),
        f0=np.array(f0),
        E_x=E_x, E_u=E_u, E_delta=E_d, E_z=E_z, e=e,
        labels=tuple(labels), intervals=tuple(intervals), gate=tuple(gate),
        G_x=G_x, G_u=G_u, G_0=G_0, z_lo=z_lo, z_hi=z_hi,
        bounds=bounds, sample_time=T, row_names=names)


def build_mld_pwa(model: PwaModel, bounds: BoxBounds,
                  sample_time: float = 1.0) -> MldSystem:
    """Compile the PWA model: one binary per region gating that region's
    Euler velocity update; the position row is region-independent."""
    if abs(model.v_min - bounds.v_min) > 1e-9 or abs(model.v_max - bounds.v_max) > 1e-9:
        raise ValueError("PWA partition does not tile the velocity box")
    n_r = len(model.regions)
    m = model.params.mass
    mu_g = model.params.mu * model.params.g
    T = sample_time

    bd = _Builder(2, 1, n_r, n_r)
    labels, intervals, gate = [], [], []
    G_x, G_u, G_0 = [], [], []
    for r, reg in enumerate(model.regions):
        # Gated expression: next velocity if region r is active.
        gx = np.array([0.0, 1.0 - T * reg.fric_slope / m])
        gu = np.array([T * reg.traction / m])
        g0 = T * (-reg.fric_offset / m - mu_g)
        lo, hi = _expr_range(gx, gu, g0, bounds)
        labels.append(("region", r))
        intervals.append((reg.v_lo, reg.v_hi))
        gate.append(r)
        G_x.append(gx)
        G_u.append(gu)
        G_0.append(g0)
        _membership(bd, r, reg.v_lo, reg.v_hi, bounds, f"region{r}")
        _envelope(bd, r, r, gx, gu, g0, lo, hi, f"z{r}")
    _one_hot(bd, list(range(n_r)), "region")

    # Position row is exact (not gated): x1+ = x1 + T x2, velocity from z.
    B_z = np.vstack([np.zeros(n_r), np.ones(n_r)])
    return _finish("pwa", bd, n_r, n_r,
                   [[1.0, T], [0.0, 0.0]], [0.0, 0.0], B_z,
                   labels, intervals, gate, G_x, G_u, G_0, bounds, T)


def build_mld_gear_input(params: VehicleParams, gears: GearTable,
                         friction: PwaFriction, bounds: BoxBounds,
                         sample_time: float = 1.0) -> MldSystem:
    """Compile the gear-input model: six gear binaries gating throttle
    products plus two friction-region binaries gating the drag pieces."""
    n_g = gears.n_gears
    n_delta = n_g + 2
    n_z = n_g + 2
    m = params.mass
    mu_g = params.mu * params.g
    T = sample_time
    alpha = friction.alpha

    bd = _Builder(2, 1, n_delta, n_z)
    labels, intervals, gate = [], [], []
    G_x, G_u, G_0 = [], [], []
    m_h, m_l = big_m_bounds(gears, bounds)

    # Gear side: w_j = delta_j * u, traction term sum_j (b_j/m) w_j.
    for j in range(n_g):
        g = gears.entry(j + 1)
        labels.append(("gear", j + 1))
        intervals.append((g.v_low, g.v_high))
        gate.append(j)
        gx = np.zeros(2)
        gu = np.array([1.0])
        G_x.append(gx)
        G_u.append(gu)
        G_0.append(0.0)
        _envelope(bd, j, j, gx, gu, 0.0, -bounds.u_max, bounds.u_max,
                  f"gear{j + 1}:u")
        bd.row(f"gear{j + 1}:v_hi", g.v_high + m_h[j], x={1: 1.0},
               d={j: m_h[j]})
        bd.row(f"gear{j + 1}:v_lo", -g.v_low + m_l[j], x={1: -1.0},
               d={j: m_l[j]})
    _one_hot(bd, list(range(n_g)), "gear")

    # Friction side: y_i = rho_i * (a_i x2 + c_i).
    pieces = ((friction.a1, friction.c1, bounds.v_min, alpha),
              (friction.a2, friction.c2, alpha, bounds.v_max))
    for i, (a, c, lo_v, hi_v) in enumerate(pieces):
        di = n_g + i
        zi = n_g + i
        labels.append(("fric", i))
        intervals.append((lo_v, hi_v))
        gate.append(di)
        gx = np.array([0.0, a])
        gu = np.array([0.0])
        G_x.append(gx)
        G_u.append(gu)
        G_0.append(c)
        lo, hi = _expr_range(gx, gu, c, bounds)
        _envelope(bd, zi, di, gx, gu, c, lo, hi, f"fric{i}:y")
        _membership(bd, di, lo_v, hi_v, bounds, f"fric{i}")
    _one_hot(bd, [n_g, n_g + 1], "fric")

    # x2+ = x2 - T mu g - (T/m)(y1 + y2) + sum_j (T b_j / m) w_j
    B_z_vel = np.concatenate([
        np.array([T * gears.entry(j + 1).traction / m for j in range(n_g)]),
        np.full(2, -T / m)])
    B_z = np.vstack([np.zeros(n_z), B_z_vel])
    return _finish("gear_input", bd, n_delta, n_z,
                   [[1.0, T], [0.0, 1.0]], [0.0, -T * mu_g], B_z,
                   labels, intervals, gate, G_x, G_u, G_0, bounds, T)


def _consistent_delta(sys: MldSystem, v: float, gear: int | None) -> np.ndarray:
    delta = np.zeros(sys.n_delta)
    if sys.kind == "pwa":
        if gear is not None:
            raise ValueError("the PWA compilation takes no gear input")
        chosen = None
        for i, ((label, _), (lo, hi)) in enumerate(zip(sys.labels, sys.intervals)):
            if label == "region" and lo <= v < hi:
                chosen = i
                break
        if chosen is None:
            # Top edge (and tolerance slack) belongs to the last region.
            if v >= sys.intervals[-1][0]:
                chosen = sys.n_delta - 1
            else:
                raise ValueError(f"velocity {v} outside the compiled partition")
        delta[chosen] = 1.0
        return delta
    if gear is None:
        raise ValueError("the gear-input compilation needs a gear")
    gear_slots = [i for i, (lab, idx) in enumerate(sys.labels)
                  if lab == "gear" and idx == gear]
    if not gear_slots:
        raise ValueError(f"gear {gear} not in the compilation")
    delta[gear_slots[0]] = 1.0
    fric_slots = [i for i, (lab, _) in enumerate(sys.labels) if lab == "fric"]
    lo0, hi0 = sys.intervals[fric_slots[0]]
    delta[fric_slots[0 if v <= hi0 else 1]] = 1.0
    return delta


def mld_simulate(sys: MldSystem, state: State, throttle: float,
                 gear: int | None = None, tol: float = 1e-7) -> State:
    """Advance one step by direct evaluation of the consistent binary/auxiliary
    assignment (no optimization); raises if the constraint block rejects it."""
    x = np.array([state.position, state.velocity])
    u = np.array([throttle])
    if not (sys.bounds.p_min - tol <= x[0] <= sys.bounds.p_max + tol
            and sys.bounds.v_min - tol <= x[1] <= sys.bounds.v_max + tol
            and abs(throttle) <= sys.bounds.u_max + tol):
        raise ValueError("state or input outside the compiled box")
    delta = _consistent_delta(sys, state.velocity, gear)
    z = np.array([delta[sys.gate[i]]
                  * (sys.G_x[i] @ x + sys.G_u[i] @ u + sys.G_0[i])
                  for i in range(sys.n_z)])
    residual = sys.constraint_residual(x, u, delta, z)
    worst = int(np.argmax(residual))
    if residual[worst] > tol:
        name = sys.row_names[worst] if sys.row_names else str(worst)
        raise ValueError(f"no consistent assignment: row {name} violated by "
                         f"{residual[worst]:.3e}")
    nxt = sys.step(x, u, delta, z)
    return State(position=float(nxt[0]), velocity=float(nxt[1]))


def format_constraints(sys: MldSystem) -> str:
    """Human-readable listing of the inequality block, one row per line."""
    var_names = (["x1", "x2", "u"]
                 + [f"d[{lab}{idx}]" for lab, idx in sys.labels]
                 + [f"z{i}" for i in range(sys.n_z)])
    lines = []
    blocks = np.hstack([sys.E_x, sys.E_u, sys.E_delta, sys.E_z])
    for r in range(blocks.shape[0]):
        terms = []
        for c, coef in enumerate(blocks[r]):
            if abs(coef) > 1e-12:
                terms.append(f"{coef:+.6g} {var_names[c]}")
        name = sys.row_names[r] if sys.row_names else f"row{r}"
        lines.append(f"{name}: {' '.join(terms) if terms else '0'} "
                     f"<= {sys.e[r]:.6g}")
    return "\n".join(lines)
