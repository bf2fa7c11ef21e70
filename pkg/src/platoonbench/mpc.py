"""Finite-horizon platoon MPC problems as mixed-integer programs.

Builds the global problem (every vehicle's model, coupled spacing costs and
softened safety constraints) and the per-vehicle local problems used by the
distributed controllers, over either vehicle model and with 1-norm (MILP) or
squared 2-norm (MIQP) costs. Every problem carries an index map so solutions
decode back into per-vehicle plans.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mip import MixedIntegerProgram
from .mld import BoxBounds, MldSystem, build_mld_gear_input, build_mld_pwa
from .models import (
    GearTable,
    DEFAULT_GEARS,
    PwaModel,
    State,
    VehicleParams,
    build_pwa_model,
    default_friction,
)

__all__ = [
    "ConstantSpacing",
    "VelocityDependentSpacing",
    "spacing_gap",
    "PlatoonConfig",
    "ModelBank",
    "compile_models",
    "AdmmTerms",
    "MpcProblem",
    "Plan",
    "build_centralized",
    "build_local",
    "build_neighborhood",
    "encode_norm",
    "decode_plan",
    "encode_plans",
    "evaluate_stage_cost",
]


# ---------------------------------------------------------------------------
# Spacing policies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantSpacing:
    """Desired gap is a fixed distance d0 [m]."""

    d0: float

    def gap(self, follower_velocity: float) -> float:
        return self.d0

    def coeffs(self) -> tuple[float, float]:
        """(constant, follower-velocity coefficient) of the gap."""
        return self.d0, 0.0


@dataclass(frozen=True)
class VelocityDependentSpacing:
    """Desired gap grows with the follower's speed: t0 * v + d0."""

    d0: float
    t0: float

    def gap(self, follower_velocity: float) -> float:
        return self.t0 * follower_velocity + self.d0

    def coeffs(self) -> tuple[float, float]:
        return self.d0, self.t0


def spacing_gap(policy, follower_velocity: float) -> float:
    """Desired headway (front position minus follower position)."""
    return policy.gap(follower_velocity)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

MODEL_KINDS = ("pwa", "gear_input")
NORM_KINDS = ("one", "two")


@dataclass(frozen=True)
class PlatoonConfig:
    """Everything a controller needs to pose its optimization problems."""

    n_vehicles: int
    horizon: int
    leader: int = 1
    model: str = "pwa"
    norm: str = "two"
    q_x: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0),
                                                            (0.0, 0.1))
    q_u: float = 1.0
    spacing: ConstantSpacing | VelocityDependentSpacing = ConstantSpacing(50.0)
    slack_weight: float = 1e4
    d_safe: float = 25.0
    bounds: BoxBounds = BoxBounds()
    a_min: float = -2.0
    a_max: float = 2.5
    sample_time: float = 1.0
    masses: tuple[float, ...] = ()
    mu: float = 0.01
    drag: float = 0.5
    gravity: float = 9.8

    def __post_init__(self):
        if self.n_vehicles < 1:
            raise ValueError("need at least one vehicle")
        if not 1 <= self.leader <= self.n_vehicles:
            raise ValueError(f"leader {self.leader} outside 1..{self.n_vehicles}")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        if self.norm not in NORM_KINDS:
            raise ValueError(f"norm must be one of {NORM_KINDS}")
        q = np.asarray(self.q_x, dtype=float)
        if q.shape != (2, 2) or abs(q[0, 1] - q[1, 0]) > 1e-12 \
                or np.linalg.eigvalsh(q).min() < -1e-12:
            raise ValueError("q_x must be symmetric positive semidefinite")
        if self.q_u < 0:
            raise ValueError("q_u must be nonnegative")
        if self.slack_weight <= 0:
            raise ValueError("slack_weight must be positive")
        if self.d_safe <= 0:
            raise ValueError("d_safe must be positive")
        if isinstance(self.spacing, ConstantSpacing) \
                and self.spacing.d0 < self.d_safe:
            raise ValueError("constant desired gap below the hard safety gap")
        if not self.masses:
            object.__setattr__(self, "masses",
                               tuple(800.0 for _ in range(self.n_vehicles)))
        if len(self.masses) != self.n_vehicles:
            raise ValueError("need one mass per vehicle")

    @property
    def q_x_mat(self) -> np.ndarray:
        return np.asarray(self.q_x, dtype=float)


@dataclass(frozen=True)
class ModelBank:
    """Per-vehicle compiled models (masses differ, so each vehicle gets its
    own dynamics)."""

    params: tuple[VehicleParams, ...]
    pwa: tuple[PwaModel, ...]
    mld: tuple[MldSystem, ...]

    def mld_for(self, vehicle: int) -> MldSystem:
        return self.mld[vehicle - 1]

    def pwa_for(self, vehicle: int) -> PwaModel:
        return self.pwa[vehicle - 1]


@functools.lru_cache(maxsize=64)
def compile_models(cfg: PlatoonConfig,
                   gears: GearTable = DEFAULT_GEARS) -> ModelBank:
    params, pwas, mlds = [], [], []
    for m in cfg.masses:
        p = VehicleParams(mass=m, mu=cfg.mu, c=cfg.drag, g=cfg.gravity)
        friction = default_friction(p, cfg.bounds.v_max)
        pwa = build_pwa_model(p, gears, friction)
        if cfg.model == "pwa":
            sys = build_mld_pwa(pwa, cfg.bounds, cfg.sample_time)
        else:
            sys = build_mld_gear_input(p, gears, friction, cfg.bounds,
                                       cfg.sample_time)
        params.append(p)
        pwas.append(pwa)
        mlds.append(sys)
    return ModelBank(params=tuple(params), pwa=tuple(pwas), mld=tuple(mlds))


# ---------------------------------------------------------------------------
# Affine expressions and the incremental program builder
# ---------------------------------------------------------------------------

class Aff:
    """Sparse affine expression sum_j coef_j * v_j + const."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict[int, float] | None = None,
                 const: float = 0.0):
        self.terms = terms or {}
        self.const = const

    @classmethod
    def var(cls, j: int, coef: float = 1.0) -> "Aff":
        return cls({j: coef})

    @classmethod
    def of(cls, const: float) -> "Aff":
        return cls({}, const)

    def __add__(self, other: "Aff") -> "Aff":
        t = dict(self.terms)
        for j, v in other.terms.items():
            t[j] = t.get(j, 0.0) + v
        return Aff(t, self.const + other.const)

    def __sub__(self, other: "Aff") -> "Aff":
        t = dict(self.terms)
        for j, v in other.terms.items():
            t[j] = t.get(j, 0.0) - v
        return Aff(t, self.const - other.const)

    def scaled(self, s: float) -> "Aff":
        return Aff({j: s * v for j, v in self.terms.items()}, s * self.const)

    def eval(self, x: np.ndarray) -> float:
        return self.const + sum(v * x[j] for j, v in self.terms.items())


class ProgramBuilder:
    """Accumulates variables, rows, and cost terms into a MixedIntegerProgram."""

    def __init__(self):
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.binary: list[bool] = []
        self.names: list[str] = []
        self._ub_rows: list[tuple[dict[int, float], float]] = []
        self._eq_rows: list[tuple[dict[int, float], float]] = []
        self.cost_lin: dict[int, float] = {}
        self.cost_quad: dict[tuple[int, int], float] = {}
        self.cost_const: float = 0.0

    @property
    def n(self) -> int:
        return len(self.lb)

    def alloc(self, name: str, lb: float, ub: float,
              binary: bool = False) -> int:
        self.lb.append(lb)
        self.ub.append(ub)
        self.binary.append(binary)
        self.names.append(name)
        return len(self.lb) - 1

    def add_leq(self, expr: Aff):
        """Constrain expr <= 0."""
        self._ub_rows.append((expr.terms, -expr.const))

    def add_eq(self, expr: Aff):
        """Constrain expr == 0."""
        self._eq_rows.append((expr.terms, -expr.const))

    def add_linear_cost(self, j: int, w: float):
        self.cost_lin[j] = self.cost_lin.get(j, 0.0) + w

    def add_quadratic_expr(self, a: Aff, b: Aff, w: float):
        """cost += w * a(x) * b(x)."""
        if w == 0.0:
            return
        for j1, v1 in a.terms.items():
            for j2, v2 in b.terms.items():
                key = (j1, j2) if j1 <= j2 else (j2, j1)
                self.cost_quad[key] = self.cost_quad.get(key, 0.0) + w * v1 * v2
        if a.const:
            for j2, v2 in b.terms.items():
                self.cost_lin[j2] = self.cost_lin.get(j2, 0.0) \
                    + w * a.const * v2
        if b.const:
            for j1, v1 in a.terms.items():
                self.cost_lin[j1] = self.cost_lin.get(j1, 0.0) \
                    + w * b.const * v1
        self.cost_const += w * a.const * b.const

    def add_linear_expr_cost(self, expr: Aff, w: float):
        for j, v in expr.terms.items():
            self.add_linear_cost(j, w * v)
        self.cost_const += w * expr.const

    def build(self) -> MixedIntegerProgram:
        n = self.n

        def to_csr(rows):
            r, c, v, rhs = [], [], [], []
            for i, (terms, b) in enumerate(rows):
                for j, coef in terms.items():
                    if coef != 0.0:
                        r.append(i)
                        c.append(j)
                        v.append(coef)
                rhs.append(b)
            return sp.csr_matrix((v, (r, c)), shape=(len(rows), n)), \
                np.array(rhs)

        A_ub, b_ub = to_csr(self._ub_rows)
        A_eq, b_eq = to_csr(self._eq_rows)
        c = np.zeros(n)
        for j, v in self.cost_lin.items():
            c[j] = v
        H = None
        if self.cost_quad:
            hr, hc, hv = [], [], []
            for (a, b), v in self.cost_quad.items():
                if a == b:
                    hr.append(a)
                    hc.append(b)
                    hv.append(2.0 * v)
                else:
                    hr.extend([a, b])
                    hc.extend([b, a])
                    hv.extend([v, v])
            H = sp.csr_matrix((hv, (hr, hc)), shape=(n, n))
        return MixedIntegerProgram(
            n=n, c=c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
            lb=np.array(self.lb), ub=np.array(self.ub),
            binary=np.array(self.binary, dtype=bool), H=H,
            c0=self.cost_const, names=tuple(self.names))


def encode_norm(pb: ProgramBuilder, kind: str, weight: np.ndarray,
                errors: list[Aff],
                aux_defs: list[tuple[int, Aff]] | None = None,
                tag: str = "t"):
    """Add the weighted norm of an affine error vector to the cost.

    1-norm: per weighted component an epigraph auxiliary t >= |(We)_r| and a
    unit linear cost (the program stays an MILP). Squared 2-norm: e'We added
    to the quadratic cost (the program becomes an MIQP).
    """
    W = np.atleast_2d(np.asarray(weight, dtype=float))
    k = len(errors)
    if W.shape != (k, k):
        raise ValueError(f"weight must be {k}x{k}")
    if np.linalg.eigvalsh(W).min() < -1e-12:
        raise ValueError("weight must be positive semidefinite")
    if kind == "one":
        for r in range(k):
            expr = Aff()
            for c in range(k):
                if W[r, c] != 0.0:
                    expr = expr + errors[c].scaled(W[r, c])
            if not expr.terms and expr.const == 0.0:
                continue
            t = pb.alloc(f"{tag}{len(pb.lb)}", 0.0, float("inf"))
            pb.add_leq(expr - Aff.var(t))
            pb.add_leq(expr.scaled(-1.0) - Aff.var(t))
            pb.add_linear_cost(t, 1.0)
            if aux_defs is not None:
                aux_defs.append((t, expr))
    elif kind == "two":
        for r in range(k):
            for c in range(k):
                if W[r, c] != 0.0:
                    pb.add_quadratic_expr(errors[r], errors[c], W[r, c])
    else:
        raise ValueError(f"unknown norm kind {kind!r}")


# ---------------------------------------------------------------------------
# Problems and plans
# ---------------------------------------------------------------------------

@dataclass
class Plan:
    """Decoded predicted trajectory of one vehicle."""

    states: np.ndarray          # (N+1, 2)
    throttles: np.ndarray       # (N,)
    gears: np.ndarray           # (N,) int
    slacks: np.ndarray          # front-pair safety slacks, (N,) (zeros if none)
    objective: float            # objective of the solve this plan came from

    def copy(self) -> "Plan":
        return Plan(self.states.copy(), self.throttles.copy(),
                    self.gears.copy(), self.slacks.copy(), self.objective)


@dataclass
class VarMap:
    x: dict[int, np.ndarray] = field(default_factory=dict)       # (N+1, 2)
    u: dict[int, np.ndarray] = field(default_factory=dict)       # (N,)
    delta: dict[int, np.ndarray] = field(default_factory=dict)   # (N, n_d)
    z: dict[int, np.ndarray] = field(default_factory=dict)       # (N, n_z)
    slack: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    copies: dict[int, np.ndarray] = field(default_factory=dict)  # (N+1, 2)


@dataclass
class MpcProblem:
    program: MixedIntegerProgram
    varmap: VarMap
    cfg: PlatoonConfig
    bank: ModelBank
    horizon: int
    vehicles: tuple[int, ...]          # vehicles with decision dynamics
    aux_defs: list[tuple[int, Aff]]
    slack_defs: list[tuple[int, Aff]]
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class AdmmTerms:
    """Consensus-ADMM augmentation attached to one local problem.

    Consensus values for the neighbor copies travel in the front/rear
    trajectory arguments of build_local; this carries the rest.
    """

    rho: float
    own_front_consensus: np.ndarray | None = None    # (N+1, 2)
    own_front_dual: np.ndarray | None = None
    own_rear_consensus: np.ndarray | None = None
    own_rear_dual: np.ndarray | None = None
    copy_front_dual: np.ndarray | None = None
    copy_rear_dual: np.ndarray | None = None


class _Assembler:
    """Shared machinery for the centralized/local/neighborhood builders.

    All position data is shifted by a common origin so the platoon sits
    inside the (otherwise non-restrictive) position box regardless of where
    it drives in world coordinates; decode undoes the shift. Costs only
    involve position differences, so objectives are origin-invariant.
    """

    def __init__(self, cfg: PlatoonConfig, bank: ModelBank,
                 origin: float = 0.0):
        self.cfg = cfg
        self.bank = bank
        self.origin = origin
        self.pb = ProgramBuilder()
        self.vm = VarMap()
        self.aux_defs: list[tuple[int, Aff]] = []
        self.slack_defs: list[tuple[int, Aff]] = []
        self.N = cfg.horizon

    def shift_traj(self, traj: np.ndarray) -> np.ndarray:
        out = np.array(traj, dtype=float)[:self.N + 1].copy()
        out[:, 0] -= self.origin
        return out

    # -- variables ---------------------------------------------------------

    def add_vehicle(self, i: int, state: State):
        cfg, pb, N = self.cfg, self.pb, self.N
        sys = self.bank.mld_for(i)
        b = cfg.bounds
        p0 = min(max(state.position - self.origin, b.p_min), b.p_max)
        v0 = min(max(state.velocity, b.v_min), b.v_max)
        xs = np.empty((N + 1, 2), dtype=int)
        for k in range(N + 1):
            if k == 0:
                xs[k, 0] = pb.alloc(f"x{i}_0_p", p0, p0)
                xs[k, 1] = pb.alloc(f"x{i}_0_v", v0, v0)
            else:
                xs[k, 0] = pb.alloc(f"x{i}_{k}_p", b.p_min, b.p_max)
                xs[k, 1] = pb.alloc(f"x{i}_{k}_v", b.v_min, b.v_max)
        us = np.array([pb.alloc(f"u{i}_{k}", -b.u_max, b.u_max)
                       for k in range(N)])
        ds = np.empty((N, sys.n_delta), dtype=int)
        zs = np.empty((N, sys.n_z), dtype=int)
        for k in range(N):
            for j in range(sys.n_delta):
                ds[k, j] = pb.alloc(f"d{i}_{k}_{j}", 0.0, 1.0, binary=True)
            for j in range(sys.n_z):
                zs[k, j] = pb.alloc(f"z{i}_{k}_{j}", sys.z_lo[j], sys.z_hi[j])
        self.vm.x[i] = xs
        self.vm.u[i] = us
        self.vm.delta[i] = ds
        self.vm.z[i] = zs
        self._add_dynamics(i, sys)
        self._add_ride_constraints(i)

    def _add_dynamics(self, i: int, sys: MldSystem):
        pb, vm, N = self.pb, self.vm, self.N
        xs, us, ds, zs = vm.x[i], vm.u[i], vm.delta[i], vm.z[i]
        for k in range(N):
            for row in range(2):
                expr = Aff.var(int(xs[k + 1, row])) + Aff.of(-sys.f0[row])
                for col in range(2):
                    if sys.A[row, col]:
                        expr = expr + Aff.var(int(xs[k, col]),
                                              -sys.A[row, col])
                if sys.B_u[row, 0]:
                    expr = expr + Aff.var(int(us[k]), -sys.B_u[row, 0])
                for j in range(sys.n_delta):
                    if sys.B_delta[row, j]:
                        expr = expr + Aff.var(int(ds[k, j]),
                                              -sys.B_delta[row, j])
                for j in range(sys.n_z):
                    if sys.B_z[row, j]:
                        expr = expr + Aff.var(int(zs[k, j]), -sys.B_z[row, j])
                pb.add_eq(expr)
            for r in range(len(sys.e)):
                expr = Aff.of(-sys.e[r])
                for col in range(2):
                    if sys.E_x[r, col]:
                        expr = expr + Aff.var(int(xs[k, col]), sys.E_x[r, col])
                if sys.E_u[r, 0]:
                    expr = expr + Aff.var(int(us[k]), sys.E_u[r, 0])
                for j in range(sys.n_delta):
                    if sys.E_delta[r, j]:
                        expr = expr + Aff.var(int(ds[k, j]),
                                              sys.E_delta[r, j])
                for j in range(sys.n_z):
                    if sys.E_z[r, j]:
                        expr = expr + Aff.var(int(zs[k, j]), sys.E_z[r, j])
                pb.add_leq(expr)

    def _add_ride_constraints(self, i: int):
        cfg, pb, N = self.cfg, self.pb, self.N
        xs = self.vm.x[i]
        dt = cfg.sample_time
        for k in range(N):
            dv = Aff.var(int(xs[k + 1, 1])) - Aff.var(int(xs[k, 1]))
            pb.add_leq(dv + Aff.of(-cfg.a_max * dt))
            pb.add_leq(dv.scaled(-1.0) + Aff.of(cfg.a_min * dt))

    def add_copy_trajectory(self, nbr: int, pinned0: np.ndarray) -> np.ndarray:
        """ADMM copy of a neighbor's state trajectory: free variables except
        the measured step 0 (pinned0 is already origin-shifted)."""
        pb, N, b = self.pb, self.N, self.cfg.bounds
        p0 = min(max(float(pinned0[0]), b.p_min), b.p_max)
        v0 = min(max(float(pinned0[1]), b.v_min), b.v_max)
        xs = np.empty((N + 1, 2), dtype=int)
        for k in range(N + 1):
            if k == 0:
                xs[k, 0] = pb.alloc(f"c{nbr}_0_p", p0, p0)
                xs[k, 1] = pb.alloc(f"c{nbr}_0_v", v0, v0)
            else:
                xs[k, 0] = pb.alloc(f"c{nbr}_{k}_p", b.p_min, b.p_max)
                xs[k, 1] = pb.alloc(f"c{nbr}_{k}_v", b.v_min, b.v_max)
        self.vm.copies[nbr] = xs
        return xs

    # -- expression helpers --------------------------------------------------

    def state_expr(self, source, k: int) -> tuple[Aff, Aff]:
        """(position, velocity) of a vehicle at step k; source is either an
        integer variable-index array or a fixed float (N+1, 2) trajectory."""
        if source.dtype.kind == "i":
            return (Aff.var(int(source[k, 0])), Aff.var(int(source[k, 1])))
        return (Aff.of(float(source[k, 0])), Aff.of(float(source[k, 1])))

    # -- cost and coupling ---------------------------------------------------

    def add_tracking(self, i: int, reference: np.ndarray):
        cfg = self.cfg
        for k in range(self.N + 1):
            pe, ve = self.state_expr(self.vm.x[i], k)
            errors = [pe + Aff.of(-float(reference[k, 0])),
                      ve + Aff.of(-float(reference[k, 1]))]
            encode_norm(self.pb, cfg.norm, cfg.q_x_mat, errors, self.aux_defs)

    def add_effort(self, i: int):
        cfg = self.cfg
        for k in range(self.N):
            err = [Aff.var(int(self.vm.u[i][k]))]
            encode_norm(self.pb, cfg.norm, np.array([[cfg.q_u]]), err,
                        self.aux_defs)

    def add_pair(self, front, rear, pair_key: tuple[int, int],
                 weight_scale: float = 1.0):
        """Spacing cost plus softened safety rows for an adjacent pair.

        front/rear are variable index arrays or fixed trajectories; the
        follower (rear) defines the desired gap.
        """
        cfg, pb, N = self.cfg, self.pb, self.N
        d0, t0 = cfg.spacing.coeffs()
        for k in range(N + 1):
            fp, fv = self.state_expr(front, k)
            rp, rv = self.state_expr(rear, k)
            gap = rv.scaled(t0) + Aff.of(d0)
            errors = [fp - rp - gap, fv - rv]
            encode_norm(self.pb, cfg.norm,
                        weight_scale * cfg.q_x_mat, errors, self.aux_defs)
        slacks = np.empty(N, dtype=int)
        for k in range(1, N + 1):
            s = pb.alloc(f"s{pair_key[0]}_{pair_key[1]}_{k}", 0.0,
                         float("inf"))
            fp, _ = self.state_expr(front, k)
            rp, _ = self.state_expr(rear, k)
            violation = rp - fp + Aff.of(cfg.d_safe)
            pb.add_leq(violation - Aff.var(s))
            pb.add_linear_cost(s, weight_scale * cfg.slack_weight)
            self.slack_defs.append((s, violation))
            slacks[k - 1] = s
        self.vm.slack[pair_key] = slacks

    def add_admm_penalty(self, var_block: np.ndarray, consensus: np.ndarray,
                         dual: np.ndarray, rho: float):
        """lambda'(w - z) + rho/2 ||w - z||^2 over a trajectory block."""
        pb = self.pb
        for k in range(var_block.shape[0]):
            for c in range(2):
                j = int(var_block[k, c])
                lam = float(dual[k, c])
                zc = float(consensus[k, c])
                w = Aff.var(j)
                pb.add_linear_expr_cost(w + Aff.of(-zc), lam)
                diff = w + Aff.of(-zc)
                pb.add_quadratic_expr(diff, diff, rho / 2.0)

    def finish(self, vehicles, meta) -> MpcProblem:
        return MpcProblem(program=self.pb.build(), varmap=self.vm,
                          cfg=self.cfg, bank=self.bank, horizon=self.N,
                          vehicles=tuple(vehicles), aux_defs=self.aux_defs,
                          slack_defs=self.slack_defs, meta=meta)


def _check_reference(reference: np.ndarray, horizon: int) -> np.ndarray:
    reference = np.asarray(reference, dtype=float)
    if reference.ndim != 2 or reference.shape[1] != 2 \
            or reference.shape[0] < horizon + 1:
        raise ValueError("reference must cover steps 0..N as an (N+1, 2) "
                         "array")
    return reference[:horizon + 1]


def _pick_origin(cfg: PlatoonConfig, position_sources) -> float:
    """Origin such that the lowest position maps just above the box floor."""
    lows = [float(np.min(src)) for src in position_sources if src is not None]
    return min(lows) - cfg.bounds.p_min - 1.0


def build_centralized(cfg: PlatoonConfig, states: list[State],
                      reference: np.ndarray,
                      bank: ModelBank | None = None) -> MpcProblem:
    """The global problem over all vehicles: leader tracking, inter-vehicle
    spacing, input effort, and softened coupled safety constraints."""
    if len(states) != cfg.n_vehicles:
        raise ValueError("need one measured state per vehicle")
    reference = _check_reference(reference, cfg.horizon)
    bank = bank or compile_models(cfg)
    origin = _pick_origin(cfg, [[s.position for s in states],
                                reference[:, 0]])
    asm = _Assembler(cfg, bank, origin)
    for i in range(1, cfg.n_vehicles + 1):
        asm.add_vehicle(i, states[i - 1])
    asm.add_tracking(cfg.leader, asm.shift_traj(reference))
    for i in range(1, cfg.n_vehicles + 1):
        asm.add_effort(i)
    for i in range(2, cfg.n_vehicles + 1):
        asm.add_pair(asm.vm.x[i - 1], asm.vm.x[i], (i - 1, i))
    return asm.finish(range(1, cfg.n_vehicles + 1),
                      meta={"kind": "centralized", "reference": reference,
                            "origin": origin})


def build_local(cfg: PlatoonConfig, i: int, state: State,
                neighbor_front: np.ndarray | None,
                neighbor_rear: np.ndarray | None,
                reference: np.ndarray | None,
                admm: AdmmTerms | None = None,
                bank: ModelBank | None = None) -> MpcProblem:
    """Vehicle i's subproblem with neighbor trajectories fixed (or, under
    ADMM, replaced by penalized local copies)."""
    if not 1 <= i <= cfg.n_vehicles:
        raise ValueError(f"vehicle {i} outside the platoon")
    if (neighbor_front is None) != (i == 1):
        raise ValueError("front neighbor trajectory required iff i > 1")
    if (neighbor_rear is None) != (i == cfg.n_vehicles):
        raise ValueError("rear neighbor trajectory required iff i < M")
    if (reference is None) == (i == cfg.leader):
        raise ValueError("reference required iff i is the leader")
    bank = bank or compile_models(cfg)
    origin = _pick_origin(cfg, [
        [state.position],
        np.asarray(neighbor_front, dtype=float)[:cfg.horizon + 1, 0]
        if neighbor_front is not None else None,
        np.asarray(neighbor_rear, dtype=float)[:cfg.horizon + 1, 0]
        if neighbor_rear is not None else None,
        _check_reference(reference, cfg.horizon)[:, 0]
        if reference is not None else None])
    asm = _Assembler(cfg, bank, origin)
    asm.add_vehicle(i, state)
    if reference is not None:
        asm.add_tracking(i, asm.shift_traj(_check_reference(reference,
                                                            cfg.horizon)))
    asm.add_effort(i)
    pair_scale = 0.5 if admm is not None else 1.0
    if neighbor_front is not None:
        front = asm.shift_traj(neighbor_front)
        if admm is not None:
            front_block = asm.add_copy_trajectory(i - 1, front[0])
            asm.add_pair(front_block, asm.vm.x[i], (i - 1, i), pair_scale)
            asm.add_admm_penalty(front_block, front, admm.copy_front_dual,
                                 admm.rho)
            asm.add_admm_penalty(asm.vm.x[i],
                                 asm.shift_traj(admm.own_front_consensus),
                                 admm.own_front_dual, admm.rho)
        else:
            asm.add_pair(front, asm.vm.x[i], (i - 1, i))
    if neighbor_rear is not None:
        rear = asm.shift_traj(neighbor_rear)
        if admm is not None:
            rear_block = asm.add_copy_trajectory(i + 1, rear[0])
            asm.add_pair(asm.vm.x[i], rear_block, (i, i + 1), pair_scale)
            asm.add_admm_penalty(rear_block, rear, admm.copy_rear_dual,
                                 admm.rho)
            asm.add_admm_penalty(asm.vm.x[i],
                                 asm.shift_traj(admm.own_rear_consensus),
                                 admm.own_rear_dual, admm.rho)
        else:
            asm.add_pair(asm.vm.x[i], rear, (i, i + 1))
    return asm.finish([i], meta={"kind": "local", "vehicle": i,
                                 "admm": admm is not None, "origin": origin})


def build_neighborhood(cfg: PlatoonConfig, center: int,
                       states: dict[int, State],
                       boundary: dict[int, np.ndarray],
                       reference: np.ndarray,
                       bank: ModelBank | None = None) -> MpcProblem:
    """The enlarged problem of the event-based scheme: the center vehicle and
    its one-hop neighbors are decision systems; two-hop neighbors enter as
    fixed boundary trajectories."""
    members = [j for j in (center - 1, center, center + 1)
               if 1 <= j <= cfg.n_vehicles]
    bank = bank or compile_models(cfg)
    reference = _check_reference(reference, cfg.horizon)
    origin = _pick_origin(cfg, [
        [states[j].position for j in members],
        reference[:, 0] if cfg.leader in members else None,
        *[np.asarray(boundary[j], dtype=float)[:cfg.horizon + 1, 0]
          for j in boundary]])
    asm = _Assembler(cfg, bank, origin)
    for j in members:
        asm.add_vehicle(j, states[j])
        asm.add_effort(j)
    if cfg.leader in members:
        asm.add_tracking(cfg.leader, asm.shift_traj(reference))
    for j in members:
        if j + 1 in members:
            asm.add_pair(asm.vm.x[j], asm.vm.x[j + 1], (j, j + 1))
    lo, hi = members[0], members[-1]
    if lo - 1 >= 1:
        asm.add_pair(asm.shift_traj(boundary[lo - 1]), asm.vm.x[lo],
                     (lo - 1, lo))
    if hi + 1 <= cfg.n_vehicles:
        asm.add_pair(asm.vm.x[hi], asm.shift_traj(boundary[hi + 1]),
                     (hi, hi + 1))
    return asm.finish(members, meta={"kind": "neighborhood",
                                     "center": center, "origin": origin})


# ---------------------------------------------------------------------------
# Decoding / encoding
# ---------------------------------------------------------------------------

def _gear_from_delta(sys: MldSystem, pwa: PwaModel, delta: np.ndarray,
                     int_tol: float) -> int:
    active = np.where(delta > 0.5)[0]
    if np.abs(delta - np.round(delta)).max() > int_tol:
        raise ValueError("binaries are not integral within tolerance")
    if sys.kind == "pwa":
        regions = [k for k in active if sys.labels[k][0] == "region"]
        if len(regions) != 1:
            raise ValueError("region binaries are not one-hot")
        return pwa.regions[sys.labels[regions[0]][1]].gear
    gears = [sys.labels[k][1] for k in active if sys.labels[k][0] == "gear"]
    if len(gears) != 1:
        raise ValueError("gear binaries are not one-hot")
    return gears[0]


def decode_plan(problem: MpcProblem, x: np.ndarray,
                int_tol: float = 1e-6) -> dict[int, Plan]:
    """Recover per-vehicle plans (states, throttles, gears, slacks) from a
    solution vector; positions come back in world coordinates."""
    x = np.asarray(x, dtype=float)
    if x.shape != (problem.program.n,):
        raise ValueError("solution dimension mismatch")
    origin = problem.meta.get("origin", 0.0)
    objective = problem.program.objective_value(x)
    plans: dict[int, Plan] = {}
    for i in problem.vehicles:
        sys = problem.bank.mld_for(i)
        pwa = problem.bank.pwa_for(i)
        states = x[problem.varmap.x[i]].copy()
        states[:, 0] += origin
        throttles = x[problem.varmap.u[i]]
        gears = np.array([
            _gear_from_delta(sys, pwa, x[problem.varmap.delta[i][k]], int_tol)
            for k in range(problem.horizon)])
        key = (i - 1, i)
        slacks = x[problem.varmap.slack[key]] \
            if key in problem.varmap.slack else np.zeros(problem.horizon)
        plans[i] = Plan(states=states, throttles=throttles, gears=gears,
                        slacks=slacks.copy(), objective=objective)
    return plans


def decode_copies(problem: MpcProblem, x: np.ndarray) -> dict[int, np.ndarray]:
    """Neighbor-copy trajectories of an ADMM local solve, world coordinates."""
    origin = problem.meta.get("origin", 0.0)
    out = {}
    for nbr, idx in problem.varmap.copies.items():
        traj = np.asarray(x)[idx].copy()
        traj[:, 0] += origin
        out[nbr] = traj
    return out


def _pwa_region_slot(pwa: PwaModel, gear: int, v: float) -> int:
    """Region index for a stored gear; the friction breakpoint picks among a
    split gear's two sub-regions. Keeps boundary-sitting solutions encodable
    (the closed-interval constraint block admits either side of a gear
    boundary)."""
    slots = [r for r, reg in enumerate(pwa.regions) if reg.gear == gear]
    if not slots:
        raise ValueError(f"gear {gear} has no region")
    if len(slots) == 1:
        return slots[0]
    return slots[0] if v <= pwa.regions[slots[0]].v_hi else slots[1]


def encode_plans(problem: MpcProblem, plans: dict[int, Plan],
                 copies: dict[int, np.ndarray] | None = None) -> np.ndarray:
    """Assemble a full solution vector from per-vehicle plans (auxiliaries,
    gated products, and slacks are reconstructed exactly). The result feeds
    warm starts and the decode/encode round-trip check."""
    origin = problem.meta.get("origin", 0.0)
    x = np.zeros(problem.program.n)
    for i in problem.vehicles:
        plan = plans[i]
        sys = problem.bank.mld_for(i)
        pwa = problem.bank.pwa_for(i)
        vm = problem.varmap
        states = plan.states.copy()
        states[:, 0] -= origin
        x[vm.x[i]] = states
        x[vm.u[i]] = plan.throttles
        for k in range(problem.horizon):
            delta = np.zeros(sys.n_delta)
            v = states[k, 1]
            gear = int(plan.gears[k])
            if sys.kind == "pwa":
                delta[_pwa_region_slot(pwa, gear, v)] = 1.0
            else:
                slot = next(s for s, lab in enumerate(sys.labels)
                            if lab == ("gear", gear))
                delta[slot] = 1.0
                fric = [s for s, lab in enumerate(sys.labels)
                        if lab[0] == "fric"]
                alpha = sys.intervals[fric[0]][1]
                delta[fric[0] if v <= alpha else fric[1]] = 1.0
            x[vm.delta[i][k]] = delta
            for zi in range(sys.n_z):
                x[vm.z[i][k][zi]] = delta[sys.gate[zi]] * (
                    sys.G_x[zi] @ states[k]
                    + sys.G_u[zi] @ [plan.throttles[k]] + sys.G_0[zi])
    if copies:
        for nbr, traj in copies.items():
            shifted = np.asarray(traj, dtype=float).copy()
            shifted[:, 0] -= origin
            x[problem.varmap.copies[nbr]] = shifted
    for s, expr in problem.slack_defs:
        x[s] = max(0.0, expr.eval(x))
    for t, expr in problem.aux_defs:
        x[t] = abs(expr.eval(x))
    return x


def resimulate_plan(problem: MpcProblem, vehicle: int, plan: Plan,
                    tol: float = 1e-6) -> float:
    """Largest per-step deviation between the plan's stored states and a
    re-simulation under its stored gears and throttles (uses the stored gear's
    plateau so boundary-sitting solutions re-simulate exactly)."""
    pwa = problem.bank.pwa_for(vehicle)
    params = problem.bank.params[vehicle - 1]
    dt = problem.cfg.sample_time
    gears_table = {reg.gear: reg.traction for reg in pwa.regions}
    worst = 0.0
    for k in range(problem.horizon):
        p, v = plan.states[k]
        region = pwa.regions[_pwa_region_slot(pwa, int(plan.gears[k]), v)] \
            if problem.cfg.model == "pwa" else None
        if region is not None:
            slope, offset = region.fric_slope, region.fric_offset
            traction = region.traction
        else:
            f = default_friction(params, problem.cfg.bounds.v_max)
            below = v <= f.alpha
            slope, offset = (f.a1, f.c1) if below else (f.a2, f.c2)
            traction = gears_table[int(plan.gears[k])]
        m = params.mass
        accel = (-(slope * v + offset) / m - params.mu * params.g
                 + (traction / m) * plan.throttles[k])
        nxt = np.array([p + dt * v, v + dt * accel])
        worst = max(worst, float(np.abs(nxt - plan.states[k + 1]).max()))
    return worst


def evaluate_stage_cost(cfg: PlatoonConfig, norm_kind: str,
                        error: np.ndarray, weight: np.ndarray) -> float:
    """Numeric counterpart of encode_norm for trace evaluation."""
    W = np.atleast_2d(weight)
    e = np.atleast_1d(error)
    if norm_kind == "one":
        return float(np.abs(W @ e).sum())
    return float(e @ W @ e)
