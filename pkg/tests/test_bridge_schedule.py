import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from dbcritic.bridge_schedule import (
    REFERENCE_BIAS_TABLE,
    BridgeParams,
    DomainError,
    EvalRule,
    ScheduleKind,
    ThetaSchedule,
    TimeGrid,
    bias_table,
    ctilde,
    ctilde_weights,
    euler_endpoint_error,
    interpolate,
    sigma2_bar,
    theta_at,
    theta_bar,
    velocity_coeff,
    xi,
)

CONST = BridgeParams(ThetaSchedule(ScheduleKind.CONSTANT, theta_const=1.0))
LINEAR = BridgeParams(ThetaSchedule(ScheduleKind.LINEAR, 0.1, 5.0))
COSINE = BridgeParams(ThetaSchedule(ScheduleKind.COSINE, 0.1, 5.0))
ALL = [CONST, LINEAR, COSINE]

# Frozen from a 40-digit mpmath evaluation of the raw (unsimplified) formulas.
XI_CONST_HALF = 0.443409441985036954
C_CONST_0 = 1.313035285499331304
C_CONST_1 = 0.850918128239321545
C_LINEAR_1 = 0.785606302538379828
C_LINEAR_03 = 1.241974728346316580
C_COSINE_03 = 0.984391572460110326


class TestSchedules:
    def test_theta_at_examples(self):
        assert theta_at(CONST.schedule, 0.37) == 1.0
        assert theta_at(LINEAR.schedule, 0.0) == pytest.approx(0.1)
        assert theta_at(COSINE.schedule, 0.5) == pytest.approx(2.55, abs=1e-12)

    def test_theta_at_rejects_outside_unit_interval(self):
        with pytest.raises(DomainError):
            theta_at(LINEAR.schedule, 1.2)
        with pytest.raises(DomainError):
            theta_at(LINEAR.schedule, -0.01)

    @pytest.mark.parametrize("params", ALL, ids=["constant", "linear", "cosine"])
    def test_theta_bar_matches_quadrature(self, params):
        sched = params.schedule
        for s, t in [(0.0, 1.0), (0.2, 0.7), (0.9, 1.0)]:
            ref, _ = integrate.quad(lambda x: theta_at(sched, x), s, t, epsabs=1e-13)
            assert theta_bar(sched, s, t) == pytest.approx(ref, abs=1e-10)

    def test_theta_bar_full_interval(self):
        assert theta_bar(CONST.schedule, 0, 1) == 1.0
        assert theta_bar(LINEAR.schedule, 0, 1) == pytest.approx(2.55, abs=1e-12)
        assert theta_bar(COSINE.schedule, 0, 1) == pytest.approx(2.55, abs=1e-12)

    def test_theta_bar_order(self):
        with pytest.raises(DomainError):
            theta_bar(CONST.schedule, 0.6, 0.5)

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            ThetaSchedule(ScheduleKind.LINEAR, theta_min=0.0)
        with pytest.raises(ValueError):
            ThetaSchedule(ScheduleKind.LINEAR, theta_min=2.0, theta_max=1.0)
        with pytest.raises(ValueError):
            BridgeParams(CONST.schedule, lambda2=0.0)

    def test_json_round_trip(self):
        for p in ALL:
            assert BridgeParams.from_dict(p.to_dict()) == p
        assert LINEAR.schedule.to_dict()["kind"] == "linear"


class TestCoefficients:
    def test_sigma2_bar(self):
        assert sigma2_bar(CONST, 0.4, 0.4) == 0.0
        assert sigma2_bar(CONST, 0, 1) == pytest.approx(1 - math.exp(-2), rel=1e-14)
        two = BridgeParams(CONST.schedule, lambda2=2.0)
        assert sigma2_bar(two, 0, 1) == pytest.approx(2 * (1 - math.exp(-2)), rel=1e-14)

    @pytest.mark.parametrize("lam2", [0.01, 1.0, 37.0])
    def test_xi_boundaries_exact(self, lam2):
        for p in ALL:
            p = BridgeParams(p.schedule, lam2)
            assert xi(p, 0.0) == 1.0
            assert xi(p, 1.0) == 0.0

    def test_xi_midpoint(self):
        assert xi(CONST, 0.5) == pytest.approx(XI_CONST_HALF, abs=1e-14)

    def test_velocity_coeff_values(self):
        assert velocity_coeff(CONST, 0.0) == pytest.approx(C_CONST_0, abs=1e-13)
        assert velocity_coeff(CONST, 1.0) == pytest.approx(C_CONST_1, abs=1e-13)
        assert velocity_coeff(LINEAR, 1.0) == pytest.approx(C_LINEAR_1, abs=1e-13)
        assert velocity_coeff(LINEAR, 0.3) == pytest.approx(C_LINEAR_03, abs=1e-13)
        assert velocity_coeff(COSINE, 0.3) == pytest.approx(C_COSINE_03, abs=1e-13)

    @pytest.mark.parametrize("params", ALL, ids=["constant", "linear", "cosine"])
    def test_velocity_is_minus_xi_derivative(self, params):
        h = 1e-6
        ts = np.linspace(0.0, 1.0, 1001)
        c = velocity_coeff(params, ts)
        inner = ts[1:-1]
        fd = (xi(params, inner + h) - xi(params, inner - h)) / (2 * h)
        assert np.max(np.abs(c[1:-1] + fd)) <= 1e-5
        # one-sided at the two ends
        assert abs(c[0] + (xi(params, h) - xi(params, 0.0)) / h) <= 1e-5
        assert abs(c[-1] + (xi(params, 1.0) - xi(params, 1.0 - h)) / h) <= 1e-5

    @pytest.mark.parametrize("params", ALL, ids=["constant", "linear", "cosine"])
    def test_velocity_integrates_to_one(self, params):
        n = 1_000_000
        edges = np.linspace(0.0, 1.0, n + 1)
        mids = 0.5 * (edges[1:] + edges[:-1])
        total = np.sum(velocity_coeff(params, mids)) / n
        assert abs(total - 1.0) <= 1e-6

    @given(
        t=st.floats(0.0, 1.0),
        lam_a=st.floats(1e-3, 1e3),
        lam_b=st.floats(1e-3, 1e3),
        kind=st.sampled_from(list(ScheduleKind)),
    )
    @settings(max_examples=200, deadline=None)
    def test_lambda2_cancels(self, t, lam_a, lam_b, kind):
        sched = ThetaSchedule(kind)
        pa, pb = BridgeParams(sched, lam_a), BridgeParams(sched, lam_b)
        assert abs(xi(pa, t) - xi(pb, t)) <= 1e-12
        assert abs(velocity_coeff(pa, t) - velocity_coeff(pb, t)) <= 1e-12


class TestDiscretization:
    def test_ctilde_examples(self):
        for p in ALL:
            assert ctilde(p, 0.0, 1.0) == 1.0
        assert ctilde(CONST, 0.0, 0.5) == pytest.approx(1 - XI_CONST_HALF, abs=1e-14)
        with pytest.raises(DomainError):
            ctilde(CONST, 0.5, 0.5)

    def test_uniform_grid_telescopes(self):
        w = ctilde_weights(CONST, TimeGrid.uniform(5))
        assert abs(w.sum() - 1.0) <= 1e-15
        assert np.all(w > 0)

    @given(
        cuts=st.lists(st.floats(1e-6, 1 - 1e-6), min_size=0, max_size=40, unique=True),
        kind=st.sampled_from(list(ScheduleKind)),
    )
    @settings(max_examples=200, deadline=None)
    def test_any_partition_telescopes(self, cuts, kind):
        grid = TimeGrid((0.0, *sorted(cuts), 1.0))
        w = ctilde_weights(BridgeParams(ThetaSchedule(kind)), grid)
        assert abs(w.sum() - 1.0) <= 1e-15

    def test_time_grid_validation(self):
        with pytest.raises(ValueError):
            TimeGrid((0.0,))
        with pytest.raises(ValueError):
            TimeGrid((0.0, 0.5, 0.5, 1.0))
        with pytest.raises(ValueError):
            TimeGrid((0.1, 1.0))
        assert TimeGrid.uniform(4).points == (0.0, 0.25, 0.5, 0.75, 1.0)

    def test_interpolate(self):
        assert interpolate(0.3, 7.0, CONST, 0.0) == 0.3
        assert interpolate(0.3, 7.0, CONST, 1.0) == 7.0
        assert interpolate(0.0, 1.0, CONST, 0.5) == pytest.approx(1 - XI_CONST_HALF, abs=1e-14)


class TestEndpointBias:
    def test_examples(self):
        assert euler_endpoint_error(CONST, 1, EvalRule.RIGHT) == pytest.approx(14.91, abs=0.005)
        assert euler_endpoint_error(LINEAR, 2, EvalRule.RIGHT) == pytest.approx(6.93, abs=0.005)
        left = euler_endpoint_error(CONST, 1, EvalRule.LEFT)
        assert left == pytest.approx(abs(1 - C_CONST_0) * 100, abs=1e-9)
        assert left == pytest.approx(31.30, abs=0.01)

    def test_linear_m1_matches_velocity_at_one(self):
        assert euler_endpoint_error(LINEAR, 1) == pytest.approx((1 - C_LINEAR_1) * 100, abs=1e-9)

    def test_right_rule_reproduces_published_table(self):
        rows = bias_table()
        for row in rows:
            expected = REFERENCE_BIAS_TABLE[row["steps"]]
            got = (row["constant_pct"], row["linear_pct"], row["cosine_pct"])
            np.testing.assert_allclose(got, expected, atol=0.05)

    def test_error_shrinks_with_steps(self):
        for p in ALL:
            errs = [euler_endpoint_error(p, m) for m in (5, 10, 100, 1000)]
            assert errs == sorted(errs, reverse=True)
