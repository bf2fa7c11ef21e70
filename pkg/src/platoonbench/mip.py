"""Sparse MILP/MIQP representation and a branch-and-bound solver.

The search (branching, node selection, pruning, incumbent and node
accounting) is implemented here; single-node relaxations are delegated to
HiGHS (through scipy) for LPs and to Clarabel for convex QPs, both
deterministic. Explored-node counts include every node whose relaxation was
solved, the root included, which fixes an exact meaning for the
memory-proxy metric reported by the benchmark.
"""

from __future__ import annotations

import heapq
import io
import re
import time
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

__all__ = [
    "MixedIntegerProgram",
    "SolverOptions",
    "BnbResult",
    "RelaxResult",
    "solve_relaxation",
    "solve_bnb",
    "brute_force_binaries",
    "export_lp_file",
    "parse_lp_file",
]

_INF = float("inf")


def _as_csr(mat, shape) -> sp.csr_matrix:
    if mat is None:
        return sp.csr_matrix(shape)
    return sp.csr_matrix(mat)


@dataclass(frozen=True)
class MixedIntegerProgram:
    """min c0 + c'v + 1/2 v'Hv  s.t.  A_ub v <= b_ub, A_eq v = b_eq,
    lb <= v <= ub, v[binary] in {0, 1}."""

    n: int
    c: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    binary: np.ndarray
    H: sp.csr_matrix | None = None
    c0: float = 0.0
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        n = self.n
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        object.__setattr__(self, "b_ub", np.asarray(self.b_ub, dtype=float))
        object.__setattr__(self, "b_eq", np.asarray(self.b_eq, dtype=float))
        object.__setattr__(self, "lb", np.asarray(self.lb, dtype=float))
        object.__setattr__(self, "ub", np.asarray(self.ub, dtype=float))
        object.__setattr__(self, "binary", np.asarray(self.binary, dtype=bool))
        object.__setattr__(self, "A_ub", _as_csr(self.A_ub, (len(self.b_ub), n)))
        object.__setattr__(self, "A_eq", _as_csr(self.A_eq, (len(self.b_eq), n)))
        if self.H is not None:
            H = sp.csr_matrix(self.H)
            if H.shape != (n, n):
                raise ValueError(f"H must be {n}x{n}, got {H.shape}")
            if abs(H - H.T).max() > 1e-9:
                raise ValueError("H must be symmetric")
            object.__setattr__(self, "H", H)
        for arr, name in ((self.c, "c"), (self.lb, "lb"), (self.ub, "ub"),
                          (self.binary, "binary")):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}")
        if self.A_ub.shape[1] != n or self.A_eq.shape[1] != n:
            raise ValueError("constraint blocks disagree with n")
        bin_lb, bin_ub = self.lb[self.binary], self.ub[self.binary]
        if bin_lb.size and (bin_lb.min() < -1e-9 or bin_ub.max() > 1 + 1e-9
                            or not np.isfinite(bin_lb).all()
                            or not np.isfinite(bin_ub).all()):
            raise ValueError("binary variables must be bounded within [0, 1]")
        if self.names is not None and len(self.names) != n:
            raise ValueError("names must have length n")

    @property
    def n_binary(self) -> int:
        return int(self.binary.sum())

    def objective_value(self, x: np.ndarray) -> float:
        val = self.c0 + float(self.c @ x)
        if self.H is not None:
            val += 0.5 * float(x @ (self.H @ x))
        return val

    def max_violation(self, x: np.ndarray) -> float:
        """Largest constraint/bound violation of x (0 when feasible)."""
        v = 0.0
        if self.b_ub.size:
            v = max(v, float((self.A_ub @ x - self.b_ub).max(initial=0.0)))
        if self.b_eq.size:
            v = max(v, float(np.abs(self.A_eq @ x - self.b_eq).max(initial=0.0)))
        v = max(v, float((self.lb - x).max(initial=0.0)))
        v = max(v, float((x - self.ub).max(initial=0.0)))
        return v

    def relaxed(self) -> "MixedIntegerProgram":
        return replace(self, binary=np.zeros(self.n, dtype=bool))


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-7
    int_tol: float = 1e-6
    rel_gap: float = 1e-8
    abs_gap: float = 1e-9
    node_limit: int | None = None
    time_limit: float | None = None
    branching: str = "most-fractional"
    node_selection: str = "best-bound"
    seed: int = 0
    disable_pruning: bool = False   # explore the full tree (testing only)

    def __post_init__(self):
        for t in (self.feas_tol, self.int_tol, self.rel_gap, self.abs_gap):
            if t <= 0:
                raise ValueError("tolerances must be positive")
        if self.branching != "most-fractional":
            raise ValueError(f"unknown branching rule {self.branching!r}")
        if self.node_selection != "best-bound":
            raise ValueError(f"unknown node selection {self.node_selection!r}")


@dataclass(frozen=True)
class BnbResult:
    status: str                  # optimal | infeasible | unbounded | node-limit | time-limit
    x: np.ndarray | None
    objective: float
    bound: float
    explored_nodes: int
    wall_time: float
    bound_history: tuple[float, ...] = ()


class RelaxResult(NamedTuple):
    status: str                  # optimal | infeasible | unbounded | error
    x: np.ndarray | None
    objective: float
    duals: dict | None


def _solve_lp(p: MixedIntegerProgram, lb, ub) -> RelaxResult:
    res = linprog(p.c, A_ub=p.A_ub if p.b_ub.size else None,
                  b_ub=p.b_ub if p.b_ub.size else None,
                  A_eq=p.A_eq if p.b_eq.size else None,
                  b_eq=p.b_eq if p.b_eq.size else None,
                  bounds=np.column_stack([lb, ub]),
                  method="highs")
    if res.status == 0:
        duals = {"ineq": np.asarray(res.ineqlin.marginals) if p.b_ub.size else np.zeros(0),
                 "eq": np.asarray(res.eqlin.marginals) if p.b_eq.size else np.zeros(0)}
        return RelaxResult("optimal", np.asarray(res.x), p.c0 + float(res.fun), duals)
    if res.status == 2:
        return RelaxResult("infeasible", None, _INF, None)
    if res.status == 3:
        return RelaxResult("unbounded", None, -_INF, None)
    return RelaxResult("error", None, _INF, None)


def _solve_qp(p: MixedIntegerProgram, lb, ub) -> RelaxResult:
    import clarabel

    n = p.n
    P = sp.triu(p.H, format="csc")
    rows = [p.A_eq]
    rhs = [p.b_eq]
    cones = []
    if p.b_eq.size:
        cones.append(clarabel.ZeroConeT(p.b_eq.size))
    ineq_blocks = [p.A_ub]
    ineq_rhs = [p.b_ub]
    fin_ub = np.where(np.isfinite(ub))[0]
    fin_lb = np.where(np.isfinite(lb))[0]
    if fin_ub.size:
        E = sp.csr_matrix((np.ones(fin_ub.size), (np.arange(fin_ub.size), fin_ub)),
                          shape=(fin_ub.size, n))
        ineq_blocks.append(E)
        ineq_rhs.append(ub[fin_ub])
    if fin_lb.size:
        E = sp.csr_matrix((-np.ones(fin_lb.size), (np.arange(fin_lb.size), fin_lb)),
                          shape=(fin_lb.size, n))
        ineq_blocks.append(E)
        ineq_rhs.append(-lb[fin_lb])
    ineq = sp.vstack(ineq_blocks, format="csr")
    if ineq.shape[0]:
        cones.append(clarabel.NonnegativeConeT(ineq.shape[0]))
    A = sp.vstack(rows + [ineq], format="csc") if p.b_eq.size else ineq.tocsc()
    b = np.concatenate(rhs + ineq_rhs) if p.b_eq.size else np.concatenate(ineq_rhs)

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-9
    settings.tol_gap_rel = 1e-9
    settings.tol_feas = 1e-9
    solver = clarabel.DefaultSolver(P, p.c, A, b, cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    if status in ("Solved", "AlmostSolved"):
        x = np.asarray(sol.x)
        return RelaxResult("optimal", x, p.objective_value(x),
                           {"cone": np.asarray(sol.z)})
    if "PrimalInfeasible" in status:
        return RelaxResult("infeasible", None, _INF, None)
    if "DualInfeasible" in status:
        return RelaxResult("unbounded", None, -_INF, None)
    return RelaxResult("error", None, _INF, None)


def solve_relaxation(p: MixedIntegerProgram, lb: np.ndarray | None = None,
                     ub: np.ndarray | None = None) -> RelaxResult:
    """Solve the continuous relaxation (integrality dropped), optionally with
    tightened bounds. Numerical failures report status "error", distinct
    from "infeasible"."""
    lb = p.lb if lb is None else lb
    ub = p.ub if ub is None else ub
    if np.any(lb > ub + 1e-12):
        return RelaxResult("infeasible", None, _INF, None)
    if p.H is not None and p.H.nnz:
        return _solve_qp(p, lb, ub)
    return _solve_lp(p, lb, ub)


def _propagate_bounds(p: MixedIntegerProgram, lb, ub, int_tol,
                      passes: int = 3) -> bool:
    """Jacobi-style activity bound tightening; returns False on proven
    infeasibility. Mutates lb/ub in place."""
    rows = [(p.A_ub, p.b_ub, False)]
    if p.b_eq.size:
        rows.append((p.A_eq, p.b_eq, True))
    for _ in range(passes):
        changed = False
        for A, b, is_eq in rows:
            if not b.size:
                continue
            for sign in ((1.0, -1.0) if is_eq else (1.0,)):
                data = sign * A.data
                cols = A.indices
                with np.errstate(invalid="ignore"):
                    contrib = np.minimum(data * lb[cols], data * ub[cols])
                    act = np.array([contrib[A.indptr[i]:A.indptr[i + 1]].sum()
                                    for i in range(len(b))])
                    rhs = sign * b
                    for i in range(len(b)):
                        lo_i, hi_i = A.indptr[i], A.indptr[i + 1]
                        others = act[i]
                        for k in range(lo_i, hi_i):
                            a = data[k]
                            j = cols[k]
                            rest = others - contrib[k]
                            if not np.isfinite(rest):
                                continue
                            room = rhs[i] - rest
                            if a > 0:
                                new = room / a
                                if new < ub[j] - 1e-12:
                                    ub[j] = new
                                    changed = True
                            else:
                                new = room / a
                                if new > lb[j] + 1e-12:
                                    lb[j] = new
                                    changed = True
        if p.binary.any():
            # A binary squeezed off one integer value is fixed to the other;
            # conflicts surface through the lb > ub check below.
            bmask = p.binary
            snap_up = bmask & (lb > int_tol)
            snap_dn = bmask & (ub < 1 - int_tol)
            lb[snap_up] = 1.0
            ub[snap_dn] = 0.0
        if np.any(lb > ub + 1e-9):
            return False
        if not changed:
            break
    return True


class _Node(NamedTuple):
    bound: float
    seq: int
    lb: np.ndarray
    ub: np.ndarray
    depth: int


def solve_bnb(p: MixedIntegerProgram, opts: SolverOptions | None = None,
              incumbent_hint: np.ndarray | None = None) -> BnbResult:
    """Branch and bound with best-bound node selection and depth-first dives.

    Branches on the most fractional binary; a valid `incumbent_hint` (for
    instance a shifted previous MPC solution) seeds the upper bound.
    Deterministic for fixed problem and options.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    bin_idx = np.where(p.binary)[0]

    inc_x, inc_obj = None, _INF
    if incumbent_hint is not None:
        hint = np.asarray(incumbent_hint, dtype=float)
        if hint.shape == (p.n,):
            snapped = hint.copy()
            snapped[bin_idx] = np.round(snapped[bin_idx])
            if (np.abs(hint[bin_idx] - snapped[bin_idx]).max(initial=0.0)
                    <= opts.int_tol
                    and p.max_violation(snapped) <= 10 * opts.feas_tol):
                inc_x, inc_obj = snapped, p.objective_value(snapped)

    lb0, ub0 = p.lb.copy(), p.ub.copy()
    explored = 0
    history: list[float] = []

    def done(status, bound):
        return BnbResult(status=status, x=inc_x, objective=inc_obj,
                         bound=bound, explored_nodes=max(explored, 1),
                         wall_time=time.perf_counter() - t0,
                         bound_history=tuple(history))

    if not _propagate_bounds(p, lb0, ub0, opts.int_tol):
        # Keep the accounting honest: infeasibility proven without a solve.
        return BnbResult("infeasible", None, _INF, _INF, 0,
                         time.perf_counter() - t0, ())

    def cutoff() -> float:
        if opts.disable_pruning or inc_obj == _INF:
            return _INF
        return inc_obj - max(opts.abs_gap, opts.rel_gap * abs(inc_obj))

    heap: list[_Node] = []
    seq = 0
    heapq.heappush(heap, _Node(-_INF, seq, lb0, ub0, 0))

    while heap:
        node = heapq.heappop(heap)
        if node.bound >= cutoff():
            # Best-bound order: every remaining node is at least as bad.
            return done("optimal", min(node.bound, inc_obj))
        current: _Node | None = node
        while current is not None:
            if opts.node_limit is not None and explored >= opts.node_limit:
                return done("node-limit",
                            min(current.bound,
                                heap[0].bound if heap else _INF, inc_obj))
            if (opts.time_limit is not None
                    and time.perf_counter() - t0 > opts.time_limit):
                return done("time-limit",
                            min(current.bound,
                                heap[0].bound if heap else _INF, inc_obj))
            if current.bound >= cutoff():
                current = None
                continue
            gb = min(current.bound, heap[0].bound if heap else _INF)
            history.append(gb if np.isfinite(gb) else -_INF)
            res = solve_relaxation(p, current.lb, current.ub)
            explored += 1
            if res.status == "infeasible":
                current = None
                continue
            if res.status == "unbounded":
                if explored == 1:
                    return done("unbounded", -_INF)
                # Children inherit a finite parent bound; an unbounded child
                # signals numerical trouble, so drop the node.
                current = None
                continue
            if res.status == "error":
                raise ArithmeticError("relaxation solver failed on a node")
            if res.objective >= cutoff():
                current = None
                continue
            frac = np.abs(res.x[bin_idx] - np.round(res.x[bin_idx])) \
                if bin_idx.size else np.zeros(0)
            if not frac.size or frac.max() <= opts.int_tol:
                x_int = res.x.copy()
                if bin_idx.size:
                    x_int[bin_idx] = np.round(x_int[bin_idx])
                obj = p.objective_value(x_int)
                if obj < inc_obj:
                    inc_x, inc_obj = x_int, obj
                current = None
                continue
            # Most fractional binary, lowest index on ties.
            k = int(bin_idx[np.argmax(np.minimum(frac, 1.0 - frac))])
            child_bound = res.objective
            near = int(round(res.x[k]))
            children = []
            for value in (near, 1 - near):
                clb, cub = current.lb.copy(), current.ub.copy()
                clb[k] = cub[k] = float(value)
                seq += 1
                children.append(_Node(child_bound, seq, clb, cub,
                                      current.depth + 1))
            heapq.heappush(heap, children[1])
            current = children[0]     # dive toward the rounded value

    bound = inc_obj if inc_obj < _INF else _INF
    status = "optimal" if inc_obj < _INF else "infeasible"
    return done(status, bound)


def brute_force_binaries(p: MixedIntegerProgram,
                         max_binaries: int = 20) -> BnbResult:
    """Enumerate every binary assignment and solve the continuous restriction
    of each; the exhaustive oracle for solve_bnb."""
    t0 = time.perf_counter()
    bin_idx = np.where(p.binary)[0]
    if bin_idx.size > max_binaries:
        raise ValueError(f"{bin_idx.size} binaries exceed the enumeration "
                         f"limit {max_binaries}")
    best_x, best_obj = None, _INF
    solved = 0
    for code in range(1 << bin_idx.size):
        lb, ub = p.lb.copy(), p.ub.copy()
        for pos, j in enumerate(bin_idx):
            bit = float((code >> pos) & 1)
            if bit < p.lb[j] - 1e-12 or bit > p.ub[j] + 1e-12:
                break
            lb[j] = ub[j] = bit
        else:
            res = solve_relaxation(p, lb, ub)
            solved += 1
            if res.status == "optimal" and res.objective < best_obj:
                best_obj, best_x = res.objective, res.x.copy()
                if bin_idx.size:
                    best_x[bin_idx] = np.round(best_x[bin_idx])
    status = "optimal" if best_x is not None else "infeasible"
    return BnbResult(status=status, x=best_x, objective=best_obj,
                     bound=best_obj, explored_nodes=max(solved, 1),
                     wall_time=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# LP-format text export / import
# ---------------------------------------------------------------------------

def _var_names(p: MixedIntegerProgram) -> list[str]:
    return list(p.names) if p.names is not None else \
        [f"x{j}" for j in range(p.n)]


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def _linear_terms(coeffs: np.ndarray, names, out: io.StringIO):
    wrote = False
    for j, cj in enumerate(coeffs):
        if cj == 0.0:
            continue
        out.write(f" {'+' if cj >= 0 else '-'} {_fmt(abs(cj))} {names[j]}")
        wrote = True
    if not wrote:
        out.write(" 0")


def export_lp_file(p: MixedIntegerProgram) -> str:
    """Emit the program in LP text format (objective, rows, bounds, binary
    section); quadratic objectives use the bracketed half-form."""
    names = _var_names(p)
    out = io.StringIO()
    out.write("Minimize\n obj:")
    _linear_terms(p.c, names, out)
    if p.c0:
        out.write(f" {'+' if p.c0 >= 0 else '-'} {_fmt(abs(p.c0))}")
    if p.H is not None and p.H.nnz:
        out.write(" + [")
        coo = sp.triu(p.H).tocoo()
        for r, cc, v in zip(coo.row, coo.col, coo.data):
            if v == 0.0:
                continue
            if r == cc:
                out.write(f" {'+' if v >= 0 else '-'} {_fmt(abs(v))} "
                          f"{names[r]} ^ 2")
            else:
                out.write(f" {'+' if v >= 0 else '-'} {_fmt(abs(2 * v))} "
                          f"{names[r]} * {names[cc]}")
        out.write(" ] / 2")
    out.write("\nSubject To\n")
    A = p.A_ub.tocsr()
    for i in range(len(p.b_ub)):
        out.write(f" r{i}:")
        row = np.zeros(p.n)
        row[A.indices[A.indptr[i]:A.indptr[i + 1]]] = \
            A.data[A.indptr[i]:A.indptr[i + 1]]
        _linear_terms(row, names, out)
        out.write(f" <= {_fmt(p.b_ub[i])}\n")
    E = p.A_eq.tocsr()
    for i in range(len(p.b_eq)):
        out.write(f" e{i}:")
        row = np.zeros(p.n)
        row[E.indices[E.indptr[i]:E.indptr[i + 1]]] = \
            E.data[E.indptr[i]:E.indptr[i + 1]]
        _linear_terms(row, names, out)
        out.write(f" = {_fmt(p.b_eq[i])}\n")
    out.write("Bounds\n")
    for j in range(p.n):
        lo, hi = p.lb[j], p.ub[j]
        if lo == -_INF and hi == _INF:
            out.write(f" {names[j]} free\n")
        elif lo == hi:
            out.write(f" {names[j]} = {_fmt(lo)}\n")
        else:
            lo_s = "-inf" if lo == -_INF else _fmt(lo)
            hi_s = "+inf" if hi == _INF else _fmt(hi)
            out.write(f" {lo_s} <= {names[j]} <= {hi_s}\n")
    if p.binary.any():
        out.write("Binaries\n")
        out.write(" " + " ".join(names[j] for j in np.where(p.binary)[0])
                  + "\n")
    out.write("End\n")
    return out.getvalue()


_SECTIONS = {
    "minimize": "objective", "maximize": "objective-max",
    "subject": "rows", "st": "rows", "s.t.": "rows", "such": "rows",
    "bounds": "bounds", "bound": "bounds",
    "binaries": "binaries", "binary": "binaries", "bin": "binaries",
    "end": "end",
}

_NUM_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _tokenize_lp(text: str) -> list[str]:
    for sym in ("<=", ">=", "=<", "=>"):
        text = text.replace(sym, f" {sym} ")
    for sym in "[]/^*:":
        text = text.replace(sym, f" {sym} ")
    # lone '=' not already padded by the two-char replacements
    text = re.sub(r"(?<![<>= ])=(?![<>= ])", " = ", text)
    tokens = []
    for raw in text.split():
        tokens.append(raw)
    return tokens


def parse_lp_file(text: str) -> MixedIntegerProgram:
    """Read a (subset of the) LP text format back into a program; covers
    everything export_lp_file writes plus common hand-written files."""
    lines = [ln.split("\\")[0] for ln in text.splitlines()]
    tokens = _tokenize_lp("\n".join(lines))
    pos = 0
    section = None
    maximize = False

    var_order: list[str] = []
    var_pos: dict[str, int] = {}

    def vid(name: str) -> int:
        if name not in var_pos:
            var_pos[name] = len(var_order)
            var_order.append(name)
        return var_pos[name]

    obj_lin: dict[int, float] = {}
    obj_quad: dict[tuple[int, int], float] = {}
    obj_const = 0.0
    rows: list[tuple[dict[int, float], str, float]] = []
    bounds_lo: dict[int, float] = {}
    bounds_hi: dict[int, float] = {}
    binaries: set[int] = set()

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def is_section(tok):
        return tok is None or tok.lower() in _SECTIONS

    def parse_number(tok):
        if tok.lower() in ("inf", "+inf", "infinity", "+infinity"):
            return _INF
        if tok.lower() in ("-inf", "-infinity"):
            return -_INF
        return float(tok)

    def parse_expr():
        """Parse a linear/quadratic expression until a relational operator
        or section keyword; returns (lin, quad, const)."""
        nonlocal pos
        lin: dict[int, float] = {}
        quad: dict[tuple[int, int], float] = {}
        const = 0.0
        sign = 1.0
        in_quad = False
        quad_terms: list[tuple[int, int, float]] = []
        while True:
            tok = peek()
            if tok is None or tok in ("<=", ">=", "=", "=<", "=>"):
                break
            if is_section(tok) and not in_quad:
                break
            pos += 1
            if tok == "+":
                sign = 1.0
                continue
            if tok == "-":
                sign = -sign
                continue
            if tok == "[":
                in_quad = True
                sign = 1.0
                continue
            if tok == "]":
                in_quad = False
                nxt = peek()
                divisor = 1.0
                if nxt == "/":
                    pos += 1
                    divisor = float(tokens[pos])
                    pos += 1
                for a, b, coef in quad_terms:
                    key = (min(a, b), max(a, b))
                    quad[key] = quad.get(key, 0.0) + coef / divisor
                sign = 1.0
                continue
            coef = sign
            name = tok
            if _NUM_RE.match(tok):
                coef = sign * float(tok)
                nxt = peek()
                if nxt is None or _NUM_RE.match(nxt) or nxt in (
                        "+", "-", "<=", ">=", "=", "[", "]") or is_section(nxt):
                    const += coef
                    sign = 1.0
                    continue
                name = tokens[pos]
                pos += 1
            j = vid(name)
            if in_quad:
                nxt = peek()
                if nxt == "^":
                    pos += 2          # consume ^ and the exponent 2
                    quad_terms.append((j, j, coef))
                elif nxt == "*":
                    pos += 1
                    j2 = vid(tokens[pos])
                    pos += 1
                    quad_terms.append((j, j2, coef / 2.0))
                    quad_terms.append((j2, j, coef / 2.0))
                else:
                    raise ValueError("linear term inside quadratic brackets")
            else:
                lin[j] = lin.get(j, 0.0) + coef
            sign = 1.0
        return lin, quad, const

    while pos < len(tokens):
        tok = tokens[pos]
        key = tok.lower()
        if key in ("subject", "such"):
            pos += 1
            if peek() and peek().lower() in ("to", "that"):
                pos += 1
            section = "rows"
            continue
        if key in _SECTIONS:
            section = _SECTIONS[key]
            maximize = maximize or section == "objective-max"
            if section == "objective-max":
                section = "objective"
            pos += 1
            if section == "end":
                break
            continue
        if section == "objective":
            label = None
            if pos + 1 < len(tokens) and tokens[pos + 1] == ":":
                label = tok
                pos += 2
            lin, quad, const = parse_expr()
            obj_lin.update({k: obj_lin.get(k, 0.0) + v for k, v in lin.items()})
            for k, v in quad.items():
                obj_quad[k] = obj_quad.get(k, 0.0) + v
            obj_const += const
            continue
        if section == "rows":
            if pos + 1 < len(tokens) and tokens[pos + 1] == ":":
                pos += 2
            lin, quad, const = parse_expr()
            if quad:
                raise ValueError("quadratic constraints are not supported")
            op = tokens[pos]
            pos += 1
            rhs_tok = tokens[pos]
            pos += 1
            rhs = parse_number(rhs_tok) - const
            rows.append((lin, op, rhs))
            continue
        if section == "bounds":
            # forms: "lo <= x <= hi", "x <= hi", "x >= lo", "x free", "x = v"
            first = tok
            pos += 1
            if _NUM_RE.match(first) or first.lower() in (
                    "inf", "-inf", "+inf", "infinity", "-infinity"):
                lo = parse_number(first)
                assert tokens[pos] in ("<=", "=<")
                pos += 1
                j = vid(tokens[pos])
                pos += 1
                bounds_lo[j] = lo
                if peek() in ("<=", "=<"):
                    pos += 1
                    bounds_hi[j] = parse_number(tokens[pos])
                    pos += 1
            else:
                j = vid(first)
                nxt = peek()
                if nxt is None:
                    continue
                if nxt.lower() == "free":
                    pos += 1
                    bounds_lo[j] = -_INF
                    bounds_hi[j] = _INF
                elif nxt in ("<=", "=<"):
                    pos += 1
                    bounds_hi[j] = parse_number(tokens[pos])
                    pos += 1
                elif nxt in (">=", "=>"):
                    pos += 1
                    bounds_lo[j] = parse_number(tokens[pos])
                    pos += 1
                elif nxt == "=":
                    pos += 1
                    v = parse_number(tokens[pos])
                    pos += 1
                    bounds_lo[j] = bounds_hi[j] = v
            continue
        if section == "binaries":
            binaries.add(vid(tok))
            pos += 1
            continue
        raise ValueError(f"unexpected token {tok!r} outside any section")

    n = len(var_order)
    c = np.zeros(n)
    for j, v in obj_lin.items():
        c[j] = v
    H = None
    if obj_quad:
        # quad[(a, b)] is the parsed objective coefficient of x_a * x_b,
        # so H_aa = 2q on the diagonal and H_ab = H_ba = q off it.
        hr, hc, hv = [], [], []
        for (a, b), v in obj_quad.items():
            if a == b:
                hr.append(a)
                hc.append(b)
                hv.append(2.0 * v)
            else:
                hr.extend([a, b])
                hc.extend([b, a])
                hv.extend([v, v])
        H = sp.csr_matrix((hv, (hr, hc)), shape=(n, n))
    if maximize:
        c = -c
        obj_const = -obj_const
        if H is not None:
            H = -H
    au_r, au_c, au_v, bu = [], [], [], []
    ae_r, ae_c, ae_v, be = [], [], [], []
    for lin, op, rhs in rows:
        if op in ("<=", "=<"):
            r = len(bu)
            for j, v in lin.items():
                au_r.append(r)
                au_c.append(j)
                au_v.append(v)
            bu.append(rhs)
        elif op in (">=", "=>"):
            r = len(bu)
            for j, v in lin.items():
                au_r.append(r)
                au_c.append(j)
                au_v.append(-v)
            bu.append(-rhs)
        else:
            r = len(be)
            for j, v in lin.items():
                ae_r.append(r)
                ae_c.append(j)
                ae_v.append(v)
            be.append(rhs)
    lb = np.zeros(n)                 # LP-format default: x >= 0
    ub = np.full(n, _INF)
    binary = np.zeros(n, dtype=bool)
    for j in binaries:
        binary[j] = True
        lb[j], ub[j] = 0.0, 1.0
    for j, v in bounds_lo.items():
        lb[j] = v
    for j, v in bounds_hi.items():
        ub[j] = v
    return MixedIntegerProgram(
        n=n, c=c,
        A_ub=sp.csr_matrix((au_v, (au_r, au_c)), shape=(len(bu), n)),
        b_ub=np.array(bu),
        A_eq=sp.csr_matrix((ae_v, (ae_r, ae_c)), shape=(len(be), n)),
        b_eq=np.array(be),
        lb=lb, ub=ub, binary=binary, H=H, c0=obj_const,
        names=tuple(var_order))
