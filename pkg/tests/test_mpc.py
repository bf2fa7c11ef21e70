import numpy as np
import pytest

from platoonbench.mip import SolverOptions, solve_bnb, solve_relaxation
from platoonbench.models import State, steady_throttle
from platoonbench.mpc import (
    Aff,
    ConstantSpacing,
    PlatoonConfig,
    ProgramBuilder,
    VelocityDependentSpacing,
    build_centralized,
    build_local,
    decode_plan,
    encode_norm,
    encode_plans,
    resimulate_plan,
    spacing_gap,
)

OPTS = SolverOptions()


def constant_ref(v, length, p0=0.0, dt=1.0):
    ks = np.arange(length)
    return np.column_stack([p0 + ks * v * dt, np.full(length, v)])


def steady_platoon(cfg, v):
    """States in perfect formation at the desired spacing for velocity v."""
    gap = cfg.spacing.gap(v)
    return [State(-i * gap, v) for i in range(cfg.n_vehicles)]


def random_platoon(rng, m):
    gaps = rng.uniform(60, 160, size=m - 1)
    positions = np.concatenate([[0.0], -np.cumsum(gaps)])
    velocities = rng.uniform(8.0, 32.0, size=m)
    return [State(float(p), float(v)) for p, v in zip(positions, velocities)]


class TestSpacing:
    def test_constant(self):
        assert spacing_gap(ConstantSpacing(50.0), 31.0) == 50.0

    def test_velocity_dependent(self):
        assert spacing_gap(VelocityDependentSpacing(10.0, 3.0), 20.0) == 70.0

    def test_zero_velocity(self):
        assert spacing_gap(VelocityDependentSpacing(10.0, 3.0), 0.0) == 10.0

    def test_constant_below_safety_rejected(self):
        with pytest.raises(ValueError, match="safety"):
            PlatoonConfig(n_vehicles=2, horizon=2,
                          spacing=ConstantSpacing(10.0))

    def test_velocity_dependent_small_d0_accepted(self):
        PlatoonConfig(n_vehicles=2, horizon=2,
                      spacing=VelocityDependentSpacing(10.0, 3.0))


class TestEncodeNorm:
    def test_scalar_one_norm_epigraph(self):
        pb = ProgramBuilder()
        e = pb.alloc("e", -3.5, -3.5)
        encode_norm(pb, "one", np.array([[1.0]]), [Aff.var(e)])
        p = pb.build()
        res = solve_relaxation(p)
        assert res.objective == pytest.approx(3.5, abs=1e-9)
        assert p.n == 2 and len(p.b_ub) == 2

    def test_zero_error_zero_cost(self):
        for kind in ("one", "two"):
            pb = ProgramBuilder()
            e = pb.alloc("e", 0.0, 0.0)
            encode_norm(pb, kind, np.array([[2.0]]), [Aff.var(e)])
            res = solve_relaxation(pb.build())
            assert res.objective == pytest.approx(0.0, abs=1e-12)

    def test_random_weighted_one_norm_matches_direct(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            k = int(rng.integers(1, 4))
            W = np.diag(rng.uniform(0.1, 2.0, size=k))
            vals = rng.normal(scale=3.0, size=k)
            pb = ProgramBuilder()
            errs = [Aff.var(pb.alloc(f"e{i}", vals[i], vals[i]))
                    for i in range(k)]
            encode_norm(pb, "one", W, errs)
            res = solve_relaxation(pb.build())
            assert res.objective == pytest.approx(np.abs(W @ vals).sum(),
                                                  abs=1e-9)

    def test_two_norm_matches_quadratic_form(self):
        rng = np.random.default_rng(6)
        W = np.array([[1.0, 0.2], [0.2, 0.5]])
        vals = rng.normal(size=2)
        pb = ProgramBuilder()
        errs = [Aff.var(pb.alloc(f"e{i}", vals[i], vals[i]))
                for i in range(2)]
        encode_norm(pb, "two", W, errs)
        res = solve_relaxation(pb.build())
        assert res.objective == pytest.approx(vals @ W @ vals, abs=1e-8)

    def test_indefinite_weight_rejected(self):
        pb = ProgramBuilder()
        e = pb.alloc("e", 0, 1)
        with pytest.raises(ValueError):
            encode_norm(pb, "two", np.array([[-1.0]]), [Aff.var(e)])


class TestCentralized:
    def test_binary_count_anchor(self):
        for model, expect in (("pwa", 105), ("gear_input", 120)):
            cfg = PlatoonConfig(n_vehicles=3, horizon=5, model=model,
                                norm="one")
            prob = build_centralized(cfg, steady_platoon(cfg, 20.0),
                                     constant_ref(20.0, 6))
            assert prob.program.n_binary == expect

    def test_single_vehicle_has_no_coupling(self):
        cfg = PlatoonConfig(n_vehicles=1, horizon=3, norm="one")
        prob = build_centralized(cfg, [State(0.0, 20.0)],
                                 constant_ref(20.0, 4))
        assert prob.varmap.slack == {}
        assert not any(nm.startswith("s") for nm in prob.program.names)

    def test_steady_plan_bounds_optimum_and_slacks_zero(self):
        cfg = PlatoonConfig(n_vehicles=3, horizon=4, norm="one")
        v = 20.0
        states = steady_platoon(cfg, v)
        ref = constant_ref(v, 5)
        prob = build_centralized(cfg, states, ref)
        bank = prob.bank
        # steady plan: hold velocity everywhere
        plans = {}
        for i in range(1, 4):
            traj = np.column_stack([
                states[i - 1].position + np.arange(5) * v,
                np.full(5, v)])
            u = steady_throttle(bank.pwa_for(i), v)
            plans[i] = decode_like(traj, u, bank.pwa_for(i).implied_gear(v))
        x = encode_plans(prob, plans)
        assert prob.program.max_violation(x) <= 1e-8
        steady_obj = prob.program.objective_value(x)
        res = solve_bnb(prob.program, OPTS, incumbent_hint=x)
        assert res.objective <= steady_obj + 1e-9
        decoded = decode_plan(prob, res.x)
        for p in decoded.values():
            assert p.slacks.max(initial=0.0) <= 1e-7

    def test_decoded_plans_resimulate(self):
        rng = np.random.default_rng(3)
        for model in ("pwa", "gear_input"):
            cfg = PlatoonConfig(n_vehicles=2, horizon=3, model=model,
                                norm="one")
            states = random_platoon(rng, 2)
            prob = build_centralized(cfg, states, constant_ref(20.0, 4))
            res = solve_bnb(prob.program, OPTS)
            plans = decode_plan(prob, res.x)
            for i, plan in plans.items():
                assert resimulate_plan(prob, i, plan) <= 1e-6

    def test_reference_window_too_short(self):
        cfg = PlatoonConfig(n_vehicles=1, horizon=5)
        with pytest.raises(ValueError, match="reference"):
            build_centralized(cfg, [State(0, 20.0)], constant_ref(20.0, 3))


class TestLocal:
    def test_boundary_vehicle_signatures(self):
        cfg = PlatoonConfig(n_vehicles=3, horizon=2, norm="one")
        traj = constant_ref(20.0, 3)
        with pytest.raises(ValueError, match="front"):
            build_local(cfg, 2, State(0, 20.0), None, traj, None)
        with pytest.raises(ValueError, match="rear"):
            build_local(cfg, 1, State(0, 20.0), None, None,
                        constant_ref(20.0, 3))
        with pytest.raises(ValueError, match="reference"):
            build_local(cfg, 2, State(0, 20.0), traj, traj, traj)

    def test_front_vehicle_rear_terms_only(self):
        cfg = PlatoonConfig(n_vehicles=2, horizon=2, leader=1, norm="one")
        rear = constant_ref(18.0, 3, p0=-60.0)
        prob = build_local(cfg, 1, State(0.0, 20.0), None, rear,
                           constant_ref(20.0, 3))
        assert list(prob.varmap.slack) == [(1, 2)]

    def test_leader_tracks_reference(self):
        # with no neighbors the leader's local problem is pure tracking:
        # starting on a constant-speed reference, positions stay exact and
        # the velocity holds until the terminal step (where coasting saves
        # more effort than the terminal velocity error costs)
        cfg = PlatoonConfig(n_vehicles=1, horizon=3, leader=1, norm="one")
        ref = constant_ref(20.0, 4)
        prob = build_local(cfg, 1, State(0.0, 20.0), None, None, ref)
        res = solve_bnb(prob.program, OPTS)
        plan = decode_plan(prob, res.x)[1]
        assert np.allclose(plan.states[:, 0], ref[:, 0], atol=1e-6)
        assert np.allclose(plan.states[:-1, 1], 20.0, atol=1e-6)

    def test_local_reproduces_centralized_with_exact_neighbors(self):
        # fixing the neighbor trajectories at the centralized optimum makes
        # vehicle i's local problem a block-coordinate restriction of the
        # global problem, so the centralized trajectory stays optimal
        rng = np.random.default_rng(11)
        cfg = PlatoonConfig(n_vehicles=3, horizon=3, norm="one")
        for trial in range(5):
            states = random_platoon(rng, 3)
            ref = constant_ref(float(rng.uniform(10, 30)), 4,
                               p0=states[0].position)
            cprob = build_centralized(cfg, states, ref)
            cres = solve_bnb(cprob.program, OPTS)
            cplans = decode_plan(cprob, cres.x)
            for i in (1, 2, 3):
                front = cplans[i - 1].states if i > 1 else None
                rear = cplans[i + 1].states if i < 3 else None
                lprob = build_local(cfg, i, states[i - 1], front, rear,
                                    ref if i == cfg.leader else None)
                lres = solve_bnb(lprob.program, OPTS,
                                 incumbent_hint=encode_plans(
                                     lprob, {i: cplans[i]}))
                lplan = decode_plan(lprob, lres.x)[i]
                assert np.abs(lplan.states - cplans[i].states).max() \
                    <= 1e-4 + 1e-9 * np.abs(cplans[i].states).max()


class TestSlackExactness:
    def test_feasible_instances_have_tiny_slacks(self):
        rng = np.random.default_rng(23)
        cfg = PlatoonConfig(n_vehicles=2, horizon=3, norm="one",
                            slack_weight=1e4)
        for _ in range(10):
            states = random_platoon(rng, 2)
            ref = constant_ref(float(rng.uniform(12, 28)), 4,
                               p0=states[0].position)
            prob = build_centralized(cfg, states, ref)
            res = solve_bnb(prob.program, OPTS)
            assert res.status == "optimal"
            for p in decode_plan(prob, res.x).values():
                assert p.slacks.max(initial=0.0) <= 1e-6


class TestModelOrdering:
    def test_pwa_cost_bounds_gear_input_cost(self):
        # the velocity-to-gear map of the PWA model is a restriction of the
        # free gear choice, so its optimal cost cannot be smaller
        rng = np.random.default_rng(31)
        for _ in range(5):
            state = State(0.0, float(rng.uniform(6, 40)))
            ref = constant_ref(float(rng.uniform(8, 38)), 4,
                               p0=state.position)
            costs = {}
            for model in ("pwa", "gear_input"):
                cfg = PlatoonConfig(n_vehicles=1, horizon=3, model=model,
                                    norm="one")
                prob = build_centralized(cfg, [state], ref)
                costs[model] = solve_bnb(prob.program, OPTS).objective
            assert costs["pwa"] >= costs["gear_input"] - 1e-6


class TestDecodeEncode:
    def test_gear_input_one_hot_decode(self):
        rng = np.random.default_rng(41)
        cfg = PlatoonConfig(n_vehicles=1, horizon=2, model="gear_input",
                            norm="one")
        state = State(0.0, 10.0)
        prob = build_centralized(cfg, [state], constant_ref(12.0, 3))
        res = solve_bnb(prob.program, OPTS)
        plan = decode_plan(prob, res.x)[1]
        for k in range(2):
            delta = res.x[prob.varmap.delta[1][k]]
            gear_slots = [s for s, lab in enumerate(prob.bank.mld_for(1).labels)
                          if lab[0] == "gear"]
            hot = int(np.argmax(delta[gear_slots]))
            assert plan.gears[k] == prob.bank.mld_for(1).labels[
                gear_slots[hot]][1]

    def test_pwa_region_gear_at_10(self):
        cfg = PlatoonConfig(n_vehicles=1, horizon=1, model="pwa", norm="one")
        prob = build_centralized(cfg, [State(0.0, 10.0)],
                                 constant_ref(10.0, 2))
        res = solve_bnb(prob.program, OPTS)
        assert decode_plan(prob, res.x)[1].gears[0] == 2

    def test_decode_encode_identity_on_random_feasible_plan(self):
        cfg = PlatoonConfig(n_vehicles=2, horizon=3, norm="one")
        states = [State(0.0, 20.0), State(-70.0, 22.0)]
        prob = build_centralized(cfg, states, constant_ref(20.0, 4))
        bank = prob.bank
        rng = np.random.default_rng(2)
        plans = {}
        for i in (1, 2):
            s = states[i - 1]
            traj = [np.array([s.position, s.velocity])]
            us, gs = [], []
            from platoonbench.models import step_pwa
            for k in range(3):
                u = float(rng.uniform(-0.3, 0.3))
                nxt, gear = step_pwa(bank.pwa_for(i), State(*traj[-1]), u, 1.0)
                us.append(u)
                gs.append(gear)
                traj.append(np.array(nxt))
            plans[i] = decode_like(np.array(traj), np.array(us),
                                   np.array(gs))
        x = encode_plans(prob, plans)
        assert prob.program.max_violation(x) <= 1e-8
        back = decode_plan(prob, x)
        for i in (1, 2):
            assert np.allclose(back[i].states, plans[i].states, atol=1e-12)
            assert np.allclose(back[i].throttles, plans[i].throttles)
            assert np.array_equal(back[i].gears, np.atleast_1d(plans[i].gears))

    def test_non_one_hot_rejected(self):
        cfg = PlatoonConfig(n_vehicles=1, horizon=1, norm="one")
        prob = build_centralized(cfg, [State(0.0, 20.0)],
                                 constant_ref(20.0, 2))
        res = solve_bnb(prob.program, OPTS)
        bad = res.x.copy()
        bad[prob.varmap.delta[1][0]] = 0.5
        with pytest.raises(ValueError):
            decode_plan(prob, bad)


def decode_like(states, throttles, gears):
    from platoonbench.mpc import Plan
    states = np.asarray(states, dtype=float)
    n = states.shape[0] - 1
    throttles = np.broadcast_to(np.asarray(throttles, dtype=float),
                                (n,)).copy()
    gears = np.broadcast_to(np.asarray(gears, dtype=int), (n,)).copy()
    return Plan(states=states, throttles=throttles, gears=gears,
                slacks=np.zeros(n), objective=float("nan"))
