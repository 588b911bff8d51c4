import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src.continuation import (ContinuationOptions, LoadDirection, apply_lambda, curve_to_frame,
                              delta_sbus, nose_point, sweep_lambda_max, trace_pv_curve)
from src.errors import BaseCaseInfeasible, ConfigError, NoseNotReached, UnknownBus
from src.grid_case import build_ybus
from src.power_flow import solve_newton
from tests.conftest import make_two_bus

NODE4 = LoadDirection.single(4, "p")


@pytest.fixture(scope="module")
def node4_curve(case14):
    return trace_pv_curve(case14, NODE4)


def test_direction_text_form():
    direction = LoadDirection.parse("4:p=1, 5:q=0.5, g1=0.2")
    assert direction.k_p == {4: 1.0}
    assert direction.k_q == {5: 0.5}
    assert direction.k_g == {1: 0.2}
    assert LoadDirection.parse(direction.describe()) == direction
    assert LoadDirection.from_dict(direction.to_dict()) == direction


@pytest.mark.parametrize("text", ["4:x=1", "four:p=1", "4:p"])
def test_direction_bad_text(text):
    with pytest.raises(ConfigError):
        LoadDirection.parse(text)


def test_direction_needs_a_nonzero_factor():
    with pytest.raises(ConfigError):
        LoadDirection(k_p={4: 0.0})
    with pytest.raises(ConfigError):
        LoadDirection(k_p={4: float("nan")})


def test_apply_lambda_scales_only_the_direction(case14):
    loaded = apply_lambda(case14, LoadDirection(k_p={4: 1.0}, k_g={1: 0.5}), 2.0)
    assert loaded.bus(4).p_demand == pytest.approx(47.8 * 3)
    assert loaded.bus(4).q_demand == case14.bus(4).q_demand
    assert loaded.bus(5).p_demand == case14.bus(5).p_demand
    assert loaded.gens[1].p_out == pytest.approx(40.0 * 2)
    assert apply_lambda(case14, NODE4, 0.0) == case14


def test_apply_lambda_unknown_targets(case14):
    with pytest.raises(UnknownBus):
        apply_lambda(case14, LoadDirection.single(99), 1.0)
    with pytest.raises(ConfigError):
        apply_lambda(case14, LoadDirection(k_g={7: 1.0}), 1.0)


def test_delta_sbus_is_the_load_slope(case14):
    ds = delta_sbus(case14, NODE4)
    assert ds[case14.position(4)] == pytest.approx(-0.478)
    assert np.count_nonzero(ds) == 1


def test_curve_starts_at_base_case(case14, node4_curve):
    first = node4_curve.points[0]
    assert first.lam == 0.0
    np.testing.assert_allclose(first.solution.v_mag, solve_newton(case14).v_mag, atol=1e-10)


def test_curve_passes_the_nose(node4_curve):
    lams = node4_curve.lambdas
    assert node4_curve.lambda_max > 0
    assert 0 < node4_curve.nose_index < len(node4_curve) - 1
    assert lams[-1] < node4_curve.lambda_max
    v = node4_curve.voltages(4)
    assert v[node4_curve.nose_index] < v[0]


def test_every_point_solves_the_power_flow(case14, node4_curve):
    y = build_ybus(case14)
    for point in node4_curve.points[::10]:
        assert point.solution.max_mismatch <= 1e-6
        loaded = apply_lambda(case14, NODE4, point.lam)
        resolved = solve_newton(loaded, y, v0=point.solution.voltage, q_state=point.solution.q_state)
        np.testing.assert_allclose(resolved.v_mag, point.solution.v_mag, atol=1e-6)


def test_nose_matches_brute_force_sweep(case14, node4_curve):
    swept = sweep_lambda_max(case14, NODE4, step=1e-3)
    assert node4_curve.lambda_max == pytest.approx(swept, rel=0.01)


def test_trace_is_fast(case14):
    started = time.perf_counter()
    trace_pv_curve(case14, NODE4)
    assert time.perf_counter() - started < 10.0


def test_doubling_the_rate_halves_the_limit(case14, node4_curve):
    doubled = trace_pv_curve(case14, NODE4.scaled(2.0))
    assert doubled.lambda_max == pytest.approx(node4_curve.lambda_max / 2, rel=5e-3)


def test_upper_branch_only(case14):
    curve = trace_pv_curve(case14, NODE4, ContinuationOptions(trace_lower_branch=False))
    assert curve.nose_index == len(curve) - 1


def test_nose_point_and_frame(node4_curve):
    lam, vm = nose_point(node4_curve, 4)
    assert lam == node4_curve.lambda_max
    assert 0 < vm < 1.05
    frame = curve_to_frame(node4_curve)
    assert list(frame.columns[:3]) == ["lambda", "bus_1_vm", "bus_2_vm"]
    assert len(frame) == len(node4_curve)


def test_two_bus_nose_near_closed_form():
    # lossless line, unity voltage, pure active load: P_max = V^2 / (2X)
    case = make_two_bus(p_load=100.0, r=0.0, x=0.1)
    curve = trace_pv_curve(case, LoadDirection.single(2, "p"))
    assert 100.0 * (1 + curve.lambda_max) == pytest.approx(500.0, rel=5e-3)


def test_infeasible_base_case():
    case = make_two_bus(p_load=900.0, r=0.0, x=0.1)
    with pytest.raises(BaseCaseInfeasible):
        trace_pv_curve(case, LoadDirection.single(2, "p"))


def test_bad_options():
    with pytest.raises(ConfigError):
        ContinuationOptions(initial_step=0.01, min_step=0.1)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.floats(0.1, 4.0))
def test_apply_lambda_composes(case14, a, b, k):
    direction = LoadDirection(k_p={4: k}, k_q={4: k})
    rebased = LoadDirection(k_p={4: k / (1 + a * k)}, k_q={4: k / (1 + a * k)})
    twice = apply_lambda(apply_lambda(case14, direction, a), rebased, b)
    once = apply_lambda(case14, direction, a + b)
    assert twice.bus(4).p_demand == pytest.approx(once.bus(4).p_demand, rel=1e-12)
    assert twice.bus(4).q_demand == pytest.approx(once.bus(4).q_demand, rel=1e-12)
    assert twice.bus(5) == case14.bus(5)


def test_lambda_rises_strictly_to_the_nose(node4_curve):
    upper = node4_curve.lambdas[:node4_curve.nose_index + 1]
    assert np.all(np.diff(upper) > 0)
    assert node4_curve.lambdas.max() == node4_curve.lambda_max


def test_upper_branch_voltage_never_rises(node4_curve):
    v = node4_curve.voltages(4)[:node4_curve.nose_index + 1]
    assert np.all(np.diff(v) <= 1e-9)


def test_point_budget_exhausted_before_the_nose(case14):
    # bus 5 carries 7.6 MW, so its nose sits far beyond 500 steps of 0.05
    with pytest.raises(NoseNotReached) as err:
        trace_pv_curve(case14, LoadDirection.single(5, "p"))
    assert err.value.max_points == 500
    assert 0 < err.value.lam < sweep_lambda_max(case14, LoadDirection.single(5, "p"), step=1e-1)


def test_larger_budget_reaches_a_far_nose(case14):
    direction = LoadDirection.single(5, "p")
    curve = trace_pv_curve(case14, direction, ContinuationOptions(max_points=2000, trace_lower_branch=False))
    assert curve.nose_index == len(curve) - 1 > 500
    assert curve.lambda_max == pytest.approx(sweep_lambda_max(case14, direction, step=1e-1), rel=0.01)
