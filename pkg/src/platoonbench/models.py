"""Vehicle models: nonlinear hybrid plant, PWA friction, gear maps, prediction models.

Two prediction models are built from the same six-speed traction data:

* the PWA model ties the gear to the velocity through a fixed partition
  (one affine region per gear, plus one extra region from the friction
  breakpoint, seven in total), and
* the gear-input model keeps the gear as a free discrete decision,
  restricted to the velocity span where its traction plateau is valid.

The plant integrates the full nonlinear dynamics with the complete traction
polylines (rise, plateau, fall); the prediction models see plateaus only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

__all__ = [
    "State",
    "VehicleParams",
    "GearEntry",
    "GearTable",
    "PwaFriction",
    "PwaRegion",
    "PwaModel",
    "DEFAULT_PARAMS",
    "DEFAULT_GEARS",
    "V_MIN",
    "V_MAX",
    "plant_traction",
    "plant_derivative",
    "plant_integrate",
    "pwa_friction_eval",
    "default_friction",
    "build_pwa_model",
    "valid_gears",
    "nearest_valid_gear",
    "step_pwa",
    "steady_throttle",
]

# Velocity box shared by all models (also the span of gear 1's low end and
# gear 6's high end).
V_MIN = 3.94
V_MAX = 45.84


class State(NamedTuple):
    """Longitudinal state: position [m] and velocity [m/s]."""

    position: float
    velocity: float


@dataclass(frozen=True)
class VehicleParams:
    """Physical constants: mass [kg], Coulomb friction mu, viscous friction
    c [N s^2/m^2], gravity g [m/s^2]."""

    mass: float = 800.0
    mu: float = 0.01
    c: float = 0.5
    g: float = 9.8

    def __post_init__(self):
        if self.mass <= 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if self.mu < 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if self.c <= 0:
            raise ValueError(f"c must be positive, got {self.c}")
        if self.g <= 0:
            raise ValueError(f"g must be positive, got {self.g}")


class GearEntry(NamedTuple):
    """One gear: plateau traction [N], plateau velocity span, and the full
    4-point traction polyline (v, b) used by the plant."""

    traction: float
    v_low: float
    v_high: float
    polyline: tuple[tuple[float, float], ...]


# Plateau values and valid spans from the published gear table; polylines
# digitized from the full traction curves.
_GEAR_DATA = (
    GearEntry(4057.0, 3.94, 9.46,
              ((2.0706, 253.54), (4.12158, 4056.7), (9.29, 4056.7), (12.38, 3042.52))),
    GearEntry(2945.0, 5.43, 13.04,
              ((2.85, 184.0), (5.675, 2944.75), (12.7956, 2944.75), (17.06, 2208.55))),
    GearEntry(2116.0, 7.56, 18.15,
              ((3.9705, 132.22), (7.90316, 2115.6), (17.8105, 2115.6), (23.7474, 1586.7))),
    GearEntry(1607.0, 9.96, 23.90,
              ((5.228, 100.415), (10.42, 1605.0), (23.454, 1605.0), (31.2704, 1205.0))),
    GearEntry(1166.0, 13.70, 32.93,
              ((7.203, 72.88), (14.335, 1166.0), (32.31, 1166.0), (43.0802, 874.7))),
    GearEntry(838.0, 19.10, 45.84,
              ((10.027, 52.4), (19.956, 838.0), (44.978, 838.0), (59.9715, 628.3))),
)


@dataclass(frozen=True)
class GearTable:
    """Ordered gear entries, lowest gear first (1-based indexing in the API)."""

    gears: tuple[GearEntry, ...] = _GEAR_DATA

    def __post_init__(self):
        gs = self.gears
        if not gs:
            raise ValueError("gear table is empty")
        for j, g in enumerate(gs, start=1):
            if not g.v_low < g.v_high:
                raise ValueError(f"gear {j}: v_low must be below v_high")
            if len(g.polyline) < 2:
                raise ValueError(f"gear {j}: polyline needs at least 2 points")
            vs = [p[0] for p in g.polyline]
            if sorted(vs) != vs:
                raise ValueError(f"gear {j}: polyline velocities must be sorted")
        for a, b in zip(gs, gs[1:]):
            if not a.traction > b.traction:
                raise ValueError("traction plateaus must be strictly decreasing")
            if not a.v_low < b.v_low:
                raise ValueError("gear v_low must be strictly increasing")
            if not a.v_high < b.v_high:
                raise ValueError("gear v_high must be strictly increasing")
            if not b.v_low < a.v_high:
                raise ValueError("consecutive gear spans must overlap")

    @property
    def n_gears(self) -> int:
        return len(self.gears)

    def entry(self, gear: int) -> GearEntry:
        if not 1 <= gear <= len(self.gears):
            raise ValueError(f"gear {gear} out of range 1..{len(self.gears)}")
        return self.gears[gear - 1]


DEFAULT_PARAMS = VehicleParams()
DEFAULT_GEARS = GearTable()


@dataclass(frozen=True)
class PwaFriction:
    """Two-piece affine approximation of the quadratic drag c*v^2.

    The pieces are a1*v + c1 on [0, alpha] and a2*v + c2 above alpha.
    """

    alpha: float
    a1: float
    c1: float
    a2: float
    c2: float

    def __post_init__(self):
        left = self.a1 * self.alpha + self.c1
        right = self.a2 * self.alpha + self.c2
        if abs(left - right) > 1e-9:
            raise ValueError("friction pieces must agree at the breakpoint")
        if abs(self.c1) > 1e-12:
            raise ValueError("friction must vanish at zero velocity")
        if self.a1 < 0 or self.a2 < 0:
            raise ValueError("friction must be nondecreasing")

    def eval(self, v: float) -> float:
        if v <= self.alpha:
            return self.a1 * v + self.c1
        return self.a2 * v + self.c2


def default_friction(params: VehicleParams = DEFAULT_PARAMS,
                     v_max: float = V_MAX) -> PwaFriction:
    """PWA drag interpolating (0, 0), (v_max/2, 3/16 c v_max^2), (v_max, c v_max^2)."""
    alpha = v_max / 2.0
    a1 = 0.375 * params.c * v_max
    a2 = 1.625 * params.c * v_max
    c2 = -0.625 * params.c * v_max * v_max
    return PwaFriction(alpha=alpha, a1=a1, c1=0.0, a2=a2, c2=c2)


def pwa_friction_eval(friction: PwaFriction, v: float) -> float:
    """Approximate drag force [N] at velocity v >= 0."""
    if v < 0:
        raise ValueError(f"velocity must be nonnegative, got {v}")
    return friction.eval(v)


class PwaRegion(NamedTuple):
    """One affine region of the PWA model over the velocity interval
    [v_lo, v_hi): drag slope/offset, implied gear, and plateau traction."""

    v_lo: float
    v_hi: float
    fric_slope: float
    fric_offset: float
    gear: int
    traction: float


@dataclass(frozen=True)
class PwaModel:
    """Velocity-partitioned affine model; regions tile [V_MIN, V_MAX]."""

    params: VehicleParams
    regions: tuple[PwaRegion, ...]

    @property
    def v_min(self) -> float:
        return self.regions[0].v_lo

    @property
    def v_max(self) -> float:
        return self.regions[-1].v_hi

    def region_index(self, v: float) -> int:
        """Index of the region containing v; intervals are half-open except
        that the topmost is closed above."""
        if v < self.v_min or v > self.v_max:
            raise ValueError(f"velocity {v} outside partition "
                             f"[{self.v_min}, {self.v_max}]")
        for r, reg in enumerate(self.regions):
            if reg.v_lo <= v < reg.v_hi:
                return r
        return len(self.regions) - 1

    def implied_gear(self, v: float) -> int:
        return self.regions[self.region_index(v)].gear

    def gear_boundaries(self) -> tuple[float, ...]:
        """Gear-region edges (friction split excluded): 7 values for 6 gears."""
        edges = [self.regions[0].v_lo]
        for a, b in zip(self.regions, self.regions[1:]):
            if b.gear != a.gear:
                edges.append(b.v_lo)
        edges.append(self.regions[-1].v_hi)
        return tuple(edges)


def build_pwa_model(params: VehicleParams, gears: GearTable,
                    friction: PwaFriction) -> PwaModel:
    """Partition the velocity box into per-gear regions split at the friction
    breakpoint.

    Each gear's region starts at the midpoint of its plateau span (the first
    gear starts at the box floor) and ends where the next gear's region
    starts; the last ends at the box ceiling. The friction breakpoint must
    fall strictly inside one gear region, which it splits, giving
    n_gears + 1 regions.
    """
    edges = [gears.entry(1).v_low]
    for j in range(2, gears.n_gears + 1):
        g = gears.entry(j)
        edges.append(0.5 * (g.v_low + g.v_high))
    edges.append(gears.entry(gears.n_gears).v_high)
    if any(not a < b for a, b in zip(edges, edges[1:])):
        raise ValueError("gear region edges are not strictly increasing")

    alpha = friction.alpha
    if any(abs(alpha - e) < 1e-12 for e in edges):
        raise ValueError("friction breakpoint coincides with a gear boundary")
    if not edges[0] < alpha < edges[-1]:
        raise ValueError("friction breakpoint outside the velocity box")

    regions = []
    for j, (lo, hi) in enumerate(zip(edges, edges[1:]), start=1):
        b = gears.entry(j).traction
        pieces = [(lo, hi)] if not lo < alpha < hi else [(lo, alpha), (alpha, hi)]
        for plo, phi in pieces:
            below = phi <= alpha
            regions.append(PwaRegion(
                v_lo=plo, v_hi=phi,
                fric_slope=friction.a1 if below else friction.a2,
                fric_offset=friction.c1 if below else friction.c2,
                gear=j, traction=b))
    return PwaModel(params=params, regions=tuple(regions))


def valid_gears(gears: GearTable, v: float) -> tuple[int, ...]:
    """Gears whose plateau span contains v (possibly empty)."""
    return tuple(j for j in range(1, gears.n_gears + 1)
                 if gears.entry(j).v_low <= v <= gears.entry(j).v_high)


def nearest_valid_gear(gears: GearTable, v: float, gear: int) -> int:
    """The valid gear closest to `gear` at velocity v (lower index on ties).

    Falls back to the gear whose span is nearest when none is valid (v
    outside the box).
    """
    valid = valid_gears(gears, v)
    if not valid:
        dist = [(max(gears.entry(j).v_low - v, v - gears.entry(j).v_high), j)
                for j in range(1, gears.n_gears + 1)]
        return min(dist)[1]
    return min(valid, key=lambda j: (abs(j - gear), j))


def plant_traction(gears: GearTable, gear: int, v: float) -> tuple[float, bool]:
    """Traction force [N] on the gear's full polyline, clamped to endpoint
    values outside its span. Returns (force, clamped)."""
    line = gears.entry(gear).polyline
    if v <= line[0][0]:
        return line[0][1], v < line[0][0]
    if v >= line[-1][0]:
        return line[-1][1], v > line[-1][0]
    for (v0, b0), (v1, b1) in zip(line, line[1:]):
        if v0 <= v <= v1:
            if v1 == v0:
                return b1, False
            t = (v - v0) / (v1 - v0)
            return b0 + t * (b1 - b0), False
    raise AssertionError("unreachable: polyline spans are contiguous")


def plant_derivative(params: VehicleParams, gears: GearTable, state: State,
                     throttle: float, gear: int) -> tuple[State, bool]:
    """Time derivative of the nonlinear plant state.

    d(position)/dt = velocity, and the acceleration balances traction against
    quadratic drag and rolling friction. Returns the derivative and a flag
    marking whether the traction lookup clamped outside the polyline span.
    """
    v = state.velocity
    b, clamped = plant_traction(gears, gear, v)
    accel = (b * throttle - params.c * v * v
             - params.mu * params.mass * params.g) / params.mass
    return State(position=v, velocity=accel), clamped


def plant_integrate(params: VehicleParams, gears: GearTable, state: State,
                    throttle: float, gear: int, horizon: float,
                    substeps: int = 16,
                    return_path: bool = False):
    """Integrate the plant over [0, horizon] with throttle and gear held
    constant, using classical RK4 over `substeps` equal sub-intervals.

    Returns (state, clamped) or (state, clamped, path) with the path holding
    the state after every sub-interval (length substeps + 1, start included).
    """
    if horizon < 0:
        raise ValueError(f"horizon must be nonnegative, got {horizon}")
    if substeps < 1:
        raise ValueError(f"substeps must be at least 1, got {substeps}")

    def f(s: State) -> tuple[State, bool]:
        return plant_derivative(params, gears, s, throttle, gear)

    h = horizon / substeps
    x = state
    clamped = False
    path = [x]
    if horizon > 0:
        for _ in range(substeps):
            k1, c1 = f(x)
            k2, c2 = f(State(x.position + 0.5 * h * k1.position,
                             x.velocity + 0.5 * h * k1.velocity))
            k3, c3 = f(State(x.position + 0.5 * h * k2.position,
                             x.velocity + 0.5 * h * k2.velocity))
            k4, c4 = f(State(x.position + h * k3.position,
                             x.velocity + h * k3.velocity))
            x = State(
                x.position + h / 6.0 * (k1.position + 2 * k2.position
                                        + 2 * k3.position + k4.position),
                x.velocity + h / 6.0 * (k1.velocity + 2 * k2.velocity
                                        + 2 * k3.velocity + k4.velocity))
            clamped = clamped or c1 or c2 or c3 or c4
            path.append(x)
    if return_path:
        return x, clamped, path
    return x, clamped


def step_pwa(model: PwaModel, state: State, throttle: float,
             step_time: float) -> tuple[State, int]:
    """One forward-Euler step of the PWA model's active region.

    Returns the next state and the gear implied by the current region.
    """
    r = model.regions[model.region_index(state.velocity)]
    m = model.params.mass
    v = state.velocity
    accel = (-(r.fric_slope * v + r.fric_offset) / m
             - model.params.mu * model.params.g
             + (r.traction / m) * throttle)
    return State(state.position + step_time * v,
                 v + step_time * accel), r.gear


def steady_throttle(model: PwaModel, v: float) -> float:
    """Throttle making v a fixed point of the discrete PWA velocity dynamics.

    Solving the Euler update for equal consecutive velocities gives
    u = (f_hat(v) + mu*g*m) / b_hat(v), independent of the step length and
    positive throughout the partition.
    """
    r = model.regions[model.region_index(v)]
    m = model.params.mass
    f_hat = r.fric_slope * v + r.fric_offset
    return (f_hat + model.params.mu * model.params.g * m) / r.traction
