import numpy as np
import pytest
import scipy.sparse as sp

from platoonbench.mip import (
    MixedIntegerProgram,
    SolverOptions,
    brute_force_binaries,
    export_lp_file,
    parse_lp_file,
    solve_bnb,
    solve_relaxation,
)
from platoonbench.mld import BoxBounds, build_mld_gear_input
from platoonbench.models import (
    DEFAULT_GEARS,
    DEFAULT_PARAMS,
    default_friction,
    valid_gears,
)

from oracles import random_lp, random_milp, random_miqp, reference_qp, \
    vertex_enumeration_lp


def lp(n, c, A=None, b=(), lb=None, ub=None, binary=None, H=None, c0=0.0,
       A_eq=None, b_eq=()):
    return MixedIntegerProgram(
        n=n, c=np.asarray(c, float),
        A_ub=sp.csr_matrix(np.asarray(A, float)) if A is not None else None,
        b_ub=list(b),
        A_eq=sp.csr_matrix(np.asarray(A_eq, float)) if A_eq is not None else None,
        b_eq=list(b_eq),
        lb=np.zeros(n) if lb is None else np.asarray(lb, float),
        ub=np.ones(n) if ub is None else np.asarray(ub, float),
        binary=np.zeros(n, bool) if binary is None else np.asarray(binary, bool),
        H=sp.csr_matrix(H) if H is not None else None, c0=c0)


class TestRelaxation:
    def test_one_dimensional_box(self):
        res = solve_relaxation(lp(1, [1.0], lb=[3.0], ub=[5.0]))
        assert res.status == "optimal"
        assert res.objective == pytest.approx(3.0)

    def test_textbook_face(self):
        res = solve_relaxation(lp(2, [-1.0, -1.0], A=[[1.0, 1.0]], b=[1.0]))
        assert res.objective == pytest.approx(-1.0)
        assert res.x[0] + res.x[1] == pytest.approx(1.0)

    def test_fifty_random_lps_against_vertex_enumeration(self):
        rng = np.random.default_rng(2024)
        for _ in range(50):
            c, A, b, lb, ub = random_lp(rng)
            status, _, ref = vertex_enumeration_lp(c, A, b, lb, ub)
            assert status == "optimal"
            res = solve_relaxation(lp(5, c, A=A, b=b, lb=lb, ub=ub))
            assert res.status == "optimal"
            assert res.objective == pytest.approx(ref, abs=1e-6)

    def test_infeasible_detected(self):
        res = solve_relaxation(lp(1, [1.0], A=[[1.0], [-1.0]], b=[1.0, -2.0]))
        assert res.status == "infeasible"

    def test_unbounded_detected(self):
        res = solve_relaxation(lp(1, [-1.0], ub=[np.inf]))
        assert res.status == "unbounded"

    def test_duals_returned_for_lp(self):
        res = solve_relaxation(lp(2, [-1.0, -1.0], A=[[1.0, 1.0]], b=[1.0]))
        assert res.duals is not None and len(res.duals["ineq"]) == 1

    def test_random_qps_against_slsqp(self):
        rng = np.random.default_rng(11)
        for _ in range(15):
            n = int(rng.integers(2, 6))
            L = rng.normal(size=(n, n)) * 0.5
            H = L @ L.T + np.eye(n)
            c = rng.normal(size=n)
            A = rng.normal(size=(2, n))
            b = A @ rng.uniform(-0.3, 0.3, n) + rng.uniform(0.1, 0.5, 2)
            lb, ub = np.full(n, -1.0), np.full(n, 1.0)
            res = solve_relaxation(lp(n, c, A=A, b=b, lb=lb, ub=ub, H=H))
            assert res.status == "optimal"
            _, ref = reference_qp(H, c, A, b, [], [], lb, ub, x0=res.x)
            assert res.objective == pytest.approx(ref, abs=1e-5)


class TestBnb:
    def test_pure_continuous_is_single_node(self):
        p = lp(2, [-1.0, -1.0], A=[[1.0, 1.0]], b=[1.0])
        res = solve_bnb(p)
        assert res.status == "optimal"
        assert res.explored_nodes == 1
        assert res.objective == pytest.approx(
            solve_relaxation(p).objective)

    def test_fifty_random_milps_against_enumeration(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            p = random_milp(rng)
            a = solve_bnb(p)
            b = brute_force_binaries(p)
            assert a.status == b.status
            if a.status == "optimal":
                assert a.objective == pytest.approx(b.objective, abs=1e-6)

    def test_twenty_random_miqps_against_enumeration(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            p = random_miqp(rng)
            a = solve_bnb(p)
            b = brute_force_binaries(p)
            assert a.status == b.status == "optimal"
            assert a.objective == pytest.approx(b.objective, abs=1e-6)

    def test_infeasible_milp(self):
        p = lp(2, [1.0, 1.0], A=[[1.0, 1.0], [-1.0, -1.0]], b=[0.2, -0.8],
               binary=[True, True])
        a = solve_bnb(p)
        b = brute_force_binaries(p)
        assert a.status == b.status == "infeasible"

    def test_determinism(self):
        rng = np.random.default_rng(3)
        p = random_milp(rng)
        r1 = solve_bnb(p, SolverOptions(seed=5))
        r2 = solve_bnb(p, SolverOptions(seed=5))
        assert r1.objective == r2.objective
        assert r1.explored_nodes == r2.explored_nodes
        assert np.array_equal(r1.x, r2.x)

    def test_bound_history_monotone_and_valid(self):
        rng = np.random.default_rng(29)
        for _ in range(10):
            p = random_milp(rng, max_bin=6, max_cont=6)
            res = solve_bnb(p)
            hist = np.array(res.bound_history)
            finite = hist[np.isfinite(hist)]
            assert np.all(np.diff(hist) >= -1e-9)
            if res.status == "optimal" and finite.size:
                assert finite.max() <= res.objective + 1e-6

    def test_pruning_soundness(self):
        rng = np.random.default_rng(31)
        for _ in range(5):
            p = random_milp(rng, max_bin=5, max_cont=4)
            fast = solve_bnb(p)
            full = solve_bnb(p, SolverOptions(disable_pruning=True))
            assert full.status == fast.status
            if fast.status == "optimal":
                assert fast.objective == pytest.approx(full.objective,
                                                       abs=1e-9)
                assert full.explored_nodes >= fast.explored_nodes

    def test_node_limit_honest(self):
        rng = np.random.default_rng(13)
        p = random_milp(rng, max_bin=8, max_cont=8)
        res = solve_bnb(p, SolverOptions(node_limit=2))
        assert res.status in ("node-limit", "optimal")
        if res.status == "node-limit":
            assert res.explored_nodes <= 2
            ref = brute_force_binaries(p)
            assert res.bound <= ref.objective + 1e-9

    def test_warm_start_hint_accepted(self):
        rng = np.random.default_rng(23)
        p = random_milp(rng)
        ref = solve_bnb(p)
        hinted = solve_bnb(p, incumbent_hint=ref.x)
        assert hinted.objective == pytest.approx(ref.objective, abs=1e-9)
        assert hinted.explored_nodes <= ref.explored_nodes

    def test_invalid_hint_ignored(self):
        p = lp(2, [1.0, 1.0], A=[[1.0, 1.0]], b=[1.0], binary=[True, True])
        res = solve_bnb(p, incumbent_hint=np.array([5.0, 5.0]))
        assert res.status == "optimal"
        assert res.objective == pytest.approx(0.0)

    def test_weak_duality_bound_vs_incumbent(self):
        rng = np.random.default_rng(37)
        p = random_milp(rng)
        res = solve_bnb(p)
        assert res.bound <= res.objective + 1e-9


class TestGearChoiceIntegration:
    def test_optimal_gear_maximizes_feasible_acceleration(self):
        # one-step tracking toward a high velocity target: the solver must
        # pick the strongest valid gear; the oracle enumerates gears.
        friction = default_friction()
        box = BoxBounds()
        sys = build_mld_gear_input(DEFAULT_PARAMS, DEFAULT_GEARS, friction, box)
        for v0 in (8.0, 12.0, 20.0, 30.0, 40.0):
            p, x1_slice = self._one_step_problem(sys, v0)
            res = solve_bnb(p)
            assert res.status == "optimal"
            # oracle: per valid gear, best reachable velocity via direct formula
            best_gear, best_v = None, -np.inf
            for j in valid_gears(DEFAULT_GEARS, v0):
                b = DEFAULT_GEARS.entry(j).traction
                f = friction.eval(v0)
                v1 = v0 + (-f / 800.0 - 0.098 + b / 800.0)
                if v1 > best_v + 1e-12:
                    best_gear, best_v = j, v1
            got_v = res.x[x1_slice][1]
            assert got_v == pytest.approx(best_v, abs=1e-6)
            gear_vals = res.x[2 + 1:2 + 1 + 6]
            assert int(np.argmax(gear_vals)) + 1 == best_gear

    @staticmethod
    def _one_step_problem(sys, v0):
        # variable layout: x0(2), u(1), delta(8), z(8), x1(2)
        n = 2 + 1 + sys.n_delta + sys.n_z + 2
        sl_x0 = slice(0, 2)
        sl_u = slice(2, 3)
        sl_d = slice(3, 3 + sys.n_delta)
        sl_z = slice(sl_d.stop, sl_d.stop + sys.n_z)
        sl_x1 = slice(sl_z.stop, sl_z.stop + 2)
        lb = np.full(n, -np.inf)
        ub = np.full(n, np.inf)
        lb[sl_x0] = ub[sl_x0] = [0.0, v0]
        lb[sl_u], ub[sl_u] = -1.0, 1.0
        lb[sl_d], ub[sl_d] = 0.0, 1.0
        lb[sl_z], ub[sl_z] = sys.z_lo, sys.z_hi
        lb[sl_x1] = [sys.bounds.p_min, sys.bounds.v_min]
        ub[sl_x1] = [sys.bounds.p_max, sys.bounds.v_max]
        binary = np.zeros(n, bool)
        binary[sl_d] = True
        # dynamics equality: x1 - A x0 - B_u u - B_d d - B_z z = f0
        A_eq = np.zeros((2, n))
        A_eq[:, sl_x1] = np.eye(2)
        A_eq[:, sl_x0] = -sys.A
        A_eq[:, sl_u] = -sys.B_u
        A_eq[:, sl_d] = -sys.B_delta
        A_eq[:, sl_z] = -sys.B_z
        # MLD inequality block
        A_ub = np.zeros((len(sys.e), n))
        A_ub[:, sl_x0] = sys.E_x
        A_ub[:, sl_u] = sys.E_u
        A_ub[:, sl_d] = sys.E_delta
        A_ub[:, sl_z] = sys.E_z
        c = np.zeros(n)
        c[sl_x1][...] = 0.0
        c[sl_z.stop + 1] = -1.0       # maximize next velocity
        p = MixedIntegerProgram(
            n=n, c=c, A_ub=sp.csr_matrix(A_ub), b_ub=sys.e,
            A_eq=sp.csr_matrix(A_eq), b_eq=sys.f0,
            lb=lb, ub=ub, binary=binary)
        return p, sl_x1


class TestBruteForce:
    def test_no_binaries_single_solve(self):
        p = lp(2, [1.0, 2.0])
        res = brute_force_binaries(p)
        assert res.explored_nodes == 1
        assert res.objective == pytest.approx(0.0)

    def test_all_assignments_infeasible(self):
        p = lp(1, [1.0], A=[[1.0], [-1.0]], b=[0.7, -0.3], binary=[True])
        assert brute_force_binaries(p).status == "infeasible"

    def test_binary_limit_guard(self):
        p = lp(21, np.zeros(21), binary=[True] * 21)
        with pytest.raises(ValueError):
            brute_force_binaries(p)


class TestLpFormat:
    def test_round_trip_dimensions_and_objective(self):
        rng = np.random.default_rng(41)
        for _ in range(10):
            p = random_milp(rng, max_bin=5, max_cont=5)
            text = export_lp_file(p)
            q = parse_lp_file(text)
            assert q.n == p.n
            assert q.A_ub.shape[0] == p.A_ub.shape[0]
            assert q.n_binary == p.n_binary
            a, b = solve_bnb(p), solve_bnb(q)
            assert a.objective == pytest.approx(b.objective, abs=1e-8)

    def test_round_trip_quadratic(self):
        rng = np.random.default_rng(43)
        p = random_miqp(rng, max_bin=3, max_cont=3)
        q = parse_lp_file(export_lp_file(p))
        assert np.allclose((q.H - p.H).toarray() if p.H is not None else 0, 0,
                           atol=1e-9)
        a, b = solve_bnb(p), solve_bnb(q)
        assert a.objective == pytest.approx(b.objective, abs=1e-8)

    def test_binary_section_lists_masked_variables(self):
        p = lp(3, [1.0, 1.0, 1.0], binary=[True, False, True])
        text = export_lp_file(p)
        binaries_line = text.split("Binaries\n")[1].splitlines()[0]
        assert binaries_line.split() == ["x0", "x2"]

    def test_parse_handwritten_file(self):
        text = """
        \\ a comment line
        Maximize
         profit: 3 x + 2 y
        Subject To
         cap: x + y <= 4
         mix: x - y >= -1
        Bounds
         0 <= x <= 3
         0 <= y <= 3
        End
        """
        p = parse_lp_file(text)
        res = solve_bnb(p)
        # max 3x+2y == -min(-3x-2y); optimum at x=3, y=1
        assert res.objective == pytest.approx(-11.0)

    def test_free_and_fixed_bounds_round_trip(self):
        p = MixedIntegerProgram(
            n=3, c=np.array([1.0, 0.0, -1.0]), A_ub=None, b_ub=[],
            A_eq=sp.csr_matrix(np.array([[1.0, 1.0, 1.0]])), b_eq=[2.0],
            lb=np.array([-np.inf, 1.5, 0.0]),
            ub=np.array([np.inf, 1.5, 4.0]),
            binary=np.zeros(3, bool))
        q = parse_lp_file(export_lp_file(p))
        # variable order may permute; compare bounds by name
        by_name = {nm: (q.lb[j], q.ub[j]) for j, nm in enumerate(q.names)}
        assert by_name["x0"] == (-np.inf, np.inf)
        assert by_name["x1"] == (1.5, 1.5)
        assert by_name["x2"] == (0.0, 4.0)
        assert q.b_eq.tolist() == [2.0]
