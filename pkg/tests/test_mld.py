import numpy as np
import pytest

from platoonbench.mld import (
    BoxBounds,
    big_m_bounds,
    build_mld_gear_input,
    build_mld_pwa,
    format_constraints,
    mld_simulate,
)
from platoonbench.models import (
    DEFAULT_GEARS,
    DEFAULT_PARAMS,
    State,
    build_pwa_model,
    default_friction,
    step_pwa,
)

FRICTION = default_friction()
MODEL = build_pwa_model(DEFAULT_PARAMS, DEFAULT_GEARS, FRICTION)
BOX = BoxBounds()
SYS_PWA = build_mld_pwa(MODEL, BOX)
SYS_GEAR = build_mld_gear_input(DEFAULT_PARAMS, DEFAULT_GEARS, FRICTION, BOX)


class TestDimensions:
    def test_binary_counts_per_step(self):
        assert SYS_PWA.n_delta == 7
        assert SYS_GEAR.n_delta == 8

    def test_horizon_totals_at_benchmark_size(self):
        # centralized problem at 3 vehicles, horizon 5
        assert 3 * 5 * SYS_PWA.n_delta == 105
        assert 3 * 5 * SYS_GEAR.n_delta == 120

    def test_unbounded_box_rejected(self):
        with pytest.raises(ValueError):
            BoxBounds(p_max=float("inf"))


class TestBigM:
    def test_per_gear_constants(self):
        m_h, m_l = big_m_bounds(DEFAULT_GEARS, BOX)
        assert m_h[5] == 0.0                       # gear 6 tops the box
        assert m_h[0] == pytest.approx(45.84 - 9.46)
        assert m_l[0] == 0.0                       # gear 1 bottoms the box
        assert m_l[3] == pytest.approx(9.96 - 3.94)

    def test_all_coefficients_finite(self):
        for sys in (SYS_PWA, SYS_GEAR):
            for block in (sys.E_x, sys.E_u, sys.E_delta, sys.E_z, sys.e):
                assert np.isfinite(block).all()

    def test_tightness_witness_per_gear(self):
        # shrinking any gear's M_H cuts off a previously feasible point:
        # the witness sits at the gear's own v_high with the binary off.
        m_h, _ = big_m_bounds(DEFAULT_GEARS, BOX)
        eps = 1e-3
        for j in range(6):
            g = DEFAULT_GEARS.entry(j + 1)
            if m_h[j] == 0.0:
                continue
            # with delta_j = 0 the row reads x2 <= v_high + M_H; the box top
            # is feasible now and infeasible once M_H shrinks by eps
            assert BOX.v_max <= g.v_high + m_h[j] + 1e-12
            assert BOX.v_max > g.v_high + (m_h[j] - eps)


class TestEquivalence:
    def test_pwa_mld_matches_explicit_step(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            s = State(rng.uniform(0, 10000), rng.uniform(3.94, 45.84))
            u = rng.uniform(-1, 1)
            a = mld_simulate(SYS_PWA, s, u)
            b, _ = step_pwa(MODEL, s, u, 1.0)
            assert a.position == pytest.approx(b.position, abs=1e-6)
            assert a.velocity == pytest.approx(b.velocity, abs=1e-6)

    def test_gear_input_matches_direct_dynamics(self):
        # x2 = 10, gear 2, u = 0.5 against the hand-evaluated update
        got = mld_simulate(SYS_GEAR, State(100.0, 10.0), 0.5, gear=2)
        f_10 = 8.595 * 10.0
        expect_v = 10.0 + (-f_10 / 800.0 - 0.098 + (2945.0 / 800.0) * 0.5)
        assert got.velocity == pytest.approx(expect_v, abs=1e-6)
        assert got.position == pytest.approx(110.0)

    def test_cross_model_agreement_on_implied_gear(self):
        rng = np.random.default_rng(9)
        for _ in range(500):
            s = State(rng.uniform(0, 9000), rng.uniform(3.94, 45.83))
            u = rng.uniform(-1, 1)
            gear = MODEL.implied_gear(s.velocity)
            a = mld_simulate(SYS_GEAR, s, u, gear=gear)
            b, _ = step_pwa(MODEL, s, u, 1.0)
            assert a.velocity == pytest.approx(b.velocity, abs=1e-6)

    def test_invalid_gear_infeasible(self):
        with pytest.raises(ValueError, match="no consistent assignment"):
            mld_simulate(SYS_GEAR, State(0.0, 10.0), 0.5, gear=6)
        with pytest.raises(ValueError, match="no consistent assignment"):
            mld_simulate(SYS_GEAR, State(0.0, 40.0), 0.5, gear=1)

    def test_out_of_box_state_rejected(self):
        with pytest.raises(ValueError, match="outside the compiled box"):
            mld_simulate(SYS_PWA, State(0.0, 2.0), 0.0)
        with pytest.raises(ValueError, match="outside the compiled box"):
            mld_simulate(SYS_PWA, State(-5.0, 10.0), 0.0)


class TestOneHot:
    def test_unique_consistent_region(self):
        # at any in-box point exactly one region assignment passes the block
        rng = np.random.default_rng(5)
        for _ in range(200):
            v = rng.uniform(3.94, 45.84)
            x = np.array([rng.uniform(0, 10000), v])
            u = np.array([rng.uniform(-1, 1)])
            feasible = []
            for r in range(SYS_PWA.n_delta):
                delta = np.zeros(SYS_PWA.n_delta)
                delta[r] = 1.0
                z = np.array([delta[SYS_PWA.gate[i]]
                              * (SYS_PWA.G_x[i] @ x + SYS_PWA.G_u[i] @ u
                                 + SYS_PWA.G_0[i])
                              for i in range(SYS_PWA.n_z)])
                res = SYS_PWA.constraint_residual(x, u, delta, z)
                if res.max() <= 1e-9:
                    feasible.append(r)
            boundary = any(abs(v - reg.v_lo) < 1e-7 for reg in MODEL.regions)
            if not boundary:
                assert len(feasible) == 1

    def test_zero_hot_rejected(self):
        x = np.array([0.0, 10.0])
        u = np.array([0.0])
        delta = np.zeros(SYS_PWA.n_delta)
        z = np.zeros(SYS_PWA.n_z)
        res = SYS_PWA.constraint_residual(x, u, delta, z)
        assert res.max() > 0.5      # the one-hot lower row fails

    def test_gear_input_needs_gear(self):
        with pytest.raises(ValueError, match="needs a gear"):
            mld_simulate(SYS_GEAR, State(0.0, 10.0), 0.0)
        with pytest.raises(ValueError, match="no gear input"):
            mld_simulate(SYS_PWA, State(0.0, 10.0), 0.0, gear=2)


class TestListing:
    def test_one_inequality_per_line(self):
        text = format_constraints(SYS_PWA)
        assert len(text.splitlines()) == len(SYS_PWA.e)
        assert all("<=" in line for line in text.splitlines())

    def test_every_gear_appears(self):
        text = format_constraints(SYS_GEAR)
        for j in range(1, 7):
            assert f"gear{j}" in text
