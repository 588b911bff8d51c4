import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from src.errors import (ConfigError, DimensionMismatch, InsufficientExcursion, RankDeficient,
                        ZeroReference)
from src.stability_index import (
    AlignmentMap,
    TemperatureConfig,
    align,
    align_batch,
    estimate_vcp,
    extract_feature,
    extract_features,
    fit_alignment,
    mape,
    monitor_stream,
    predict_vcp,
    records_to_frame,
    reduce_variance,
    risk_band,
)
from src.vae import encode


def test_reduce_variance_values():
    npt.assert_allclose(reduce_variance([0.04, 0.01], 0.05), [0.002, 0.0005])
    npt.assert_array_equal(reduce_variance([0.04, 0.01], 0.0), [0.0, 0.0])
    npt.assert_array_equal(reduce_variance([0.04, 0.01], 1.0), [0.04, 0.01])


@pytest.mark.parametrize("phi", [-0.1, 1.5])
def test_temperature_range(phi):
    with pytest.raises(ConfigError):
        TemperatureConfig(phi)


# features

def test_zero_temperature_gives_the_mean(tiny_model):
    x = np.array([0.2, 0.4, 0.6, 0.8])
    a = extract_feature(tiny_model, x, TemperatureConfig(0.0), np.random.default_rng(1))
    b = extract_feature(tiny_model, x, TemperatureConfig(0.0), np.random.default_rng(2))
    npt.assert_allclose(a.z_hat, encode(tiny_model, x).mu, rtol=1e-12)
    npt.assert_array_equal(a.z_hat, b.z_hat)
    npt.assert_array_equal(a.var, 0.0)


def test_seeded_feature_is_reproducible(tiny_model):
    x = np.array([0.2, 0.4, 0.6, 0.8])
    temp = TemperatureConfig(0.05)
    a = extract_feature(tiny_model, x, temp, np.random.default_rng(42))
    b = extract_feature(tiny_model, x, temp, np.random.default_rng(42))
    assert np.array_equal(a.z_hat, b.z_hat)
    assert not np.array_equal(a.z_hat, a.mu)


def test_feature_variance_is_scaled(tiny_model):
    x = np.array([0.3, 0.1, 0.9, 0.5])
    dist = encode(tiny_model, x)
    rows = np.tile(x, (10_000, 1))
    z = extract_features(tiny_model, rows, TemperatureConfig(0.05), np.random.default_rng(8))
    npt.assert_allclose(z.var(axis=0), 0.05 * dist.var, rtol=0.1)
    npt.assert_allclose(z.mean(axis=0), dist.mu, atol=4 * np.sqrt(0.05 * dist.var / 10_000))


def test_feature_width_checks(tiny_model):
    with pytest.raises(DimensionMismatch):
        extract_feature(tiny_model, np.zeros(5), TemperatureConfig())
    with pytest.raises(DimensionMismatch):
        extract_feature(tiny_model, np.zeros((2, 4)), TemperatureConfig())
    with pytest.raises(DimensionMismatch):
        extract_features(tiny_model, np.zeros((3, 2)), TemperatureConfig())


# alignment

def test_alignment_identity():
    z = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 3.0], [-1.0, 0.5]])
    amap = fit_alignment(z, z)
    npt.assert_allclose(amap.beta, np.eye(2), atol=1e-12)
    npt.assert_array_equal(amap.intercept, 0.0)


def test_alignment_recovers_linear_map():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(50, 2))
    m = np.array([[0.7, -0.2], [1.5, 0.3]])
    c = z @ m
    amap = fit_alignment(z, c)
    npt.assert_allclose(amap.beta, m, atol=1e-10)
    npt.assert_allclose(align_batch(amap, z), c, atol=1e-10)
    lam, v = align(amap, z[3])
    assert (lam, v) == pytest.approx(tuple(c[3]), abs=1e-10)


def test_alignment_normal_equations_and_optimality():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(200, 2))
    c = rng.normal(size=(200, 2))
    amap = fit_alignment(z, c)
    npt.assert_allclose(z.T @ (z @ amap.beta - c), 0.0, atol=1e-8)

    best = np.sum((z @ amap.beta - c) ** 2)
    for _ in range(100):
        delta = rng.normal(scale=1e-3, size=(2, 2))
        assert np.sum((z @ (amap.beta + delta) - c) ** 2) >= best - 1e-12


def test_alignment_with_intercept():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(30, 2))
    m = np.array([[2.0, 0.1], [-1.0, 0.4]])
    c = z @ m + np.array([0.5, 1.0])
    amap = fit_alignment(z, c, fit_intercept=True)
    npt.assert_allclose(amap.beta, m, atol=1e-10)
    npt.assert_allclose(amap.intercept, [0.5, 1.0], atol=1e-10)


def test_collinear_features_are_rank_deficient():
    s = np.linspace(0.0, 1.0, 20)
    z = np.column_stack([s, 2.0 * s])
    with pytest.raises(RankDeficient):
        fit_alignment(z, np.column_stack([s, s]))


def test_too_few_rows():
    with pytest.raises(RankDeficient):
        fit_alignment(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0]]))


def test_alignment_shape_checks():
    with pytest.raises(DimensionMismatch):
        fit_alignment(np.zeros((4, 2)), np.zeros((3, 2)))
    with pytest.raises(DimensionMismatch):
        fit_alignment(np.zeros((4, 2)), np.zeros((4, 3)))


def test_align_values():
    assert align(AlignmentMap.identity(), np.array([0.3, -0.4])) == (0.3, -0.4)
    assert align(AlignmentMap(np.zeros((2, 2)), np.zeros(2)), np.array([0.3, -0.4])) == (0.0, 0.0)
    with pytest.raises(DimensionMismatch):
        align(AlignmentMap.identity(), np.zeros(3))


def test_alignment_dict_round_trip():
    amap = AlignmentMap(np.array([[0.1, 0.2], [0.3, 0.4]]), np.array([1.0, 2.0]))
    back = AlignmentMap.from_dict(amap.to_dict())
    npt.assert_array_equal(back.beta, amap.beta)
    npt.assert_array_equal(back.intercept, amap.intercept)


def test_alignment_map_checks():
    with pytest.raises(DimensionMismatch):
        AlignmentMap(np.zeros((2, 3)), np.zeros(2))
    with pytest.raises(ConfigError):
        AlignmentMap(np.full((2, 2), np.nan), np.zeros(2))


# monitoring

def _stream(n=6):
    return [(t, np.array([0.1 * t, 0.5, 0.9 - 0.1 * t, 0.3])) for t in range(n)]


def test_monitor_is_stateless_across_tick_order(tiny_model):
    temp = TemperatureConfig(0.05)
    amap = AlignmentMap.identity()
    forward = {r.t: r for r in monitor_stream(tiny_model, amap, temp, _stream(), seed=3)}
    shuffled = list(reversed(_stream()))
    backward = {r.t: r for r in monitor_stream(tiny_model, amap, temp, shuffled, seed=3)}
    assert forward == backward


def test_monitor_constant_input(tiny_model):
    x = np.array([0.5, 0.5, 0.5, 0.5])
    records = list(monitor_stream(tiny_model, AlignmentMap.identity(), TemperatureConfig(0.0),
                                  [(t, x) for t in range(5)]))
    assert len({(r.lambda_hat, r.v_hat) for r in records}) == 1
    assert records[0].z == (records[0].lambda_hat, records[0].v_hat)


def test_monitor_keeps_going_after_bad_tick(tiny_model):
    stream = [(0, np.full(4, 0.5)), (1, np.zeros(3)), (2, np.full(4, 0.5))]
    records = list(monitor_stream(tiny_model, AlignmentMap.identity(), TemperatureConfig(0.0), stream))
    assert [r.t for r in records] == [0, 1, 2]
    assert records[1].error is not None
    assert math.isnan(records[1].lambda_hat)
    assert records[2].error is None and records[2].lambda_hat == records[0].lambda_hat


def test_records_to_frame(tiny_model):
    records = monitor_stream(tiny_model, AlignmentMap.identity(), TemperatureConfig(0.0), _stream(3))
    frame = records_to_frame(records)
    assert list(frame.columns) == ["t", "z1", "z2", "lambda_hat", "v_hat"]
    assert list(frame["t"]) == [0, 1, 2]


# collapse point

def test_estimate_vcp_simple_curve():
    est = estimate_vcp([(0.0, 1.0), (1.0, 0.9), (0.8, 0.7)])
    assert est.lambda_pre == 1.0
    assert est.nose_sample_index == 1


def test_estimate_vcp_first_maximum_wins():
    est = estimate_vcp([(0.0, 1.0), (2.0, 0.9), (2.0, 0.8), (1.0, 0.6)])
    assert est.nose_sample_index == 1


@pytest.mark.parametrize("series", [[], [(0.0, 1.0), (0.5, 0.9), (0.9, 0.8)]])
def test_estimate_vcp_without_nose(series):
    with pytest.raises(InsufficientExcursion):
        estimate_vcp(series)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.9, 0.99), min_size=1, max_size=10))
def test_post_nose_samples_do_not_move_estimate(tail):
    base = [(0.0, 1.0), (0.6, 0.95), (1.0, 0.85), (0.7, 0.6)]
    extended = base + [(lam, 0.5) for lam in tail]
    assert estimate_vcp(extended).lambda_pre == estimate_vcp(base).lambda_pre
    assert estimate_vcp(extended).nose_sample_index == 2


def test_predict_vcp_is_deterministic_at_zero_temperature(tiny_model):
    t = np.linspace(0.0, 1.0, 15)
    forward = np.column_stack([t, 1 - t, np.sin(np.pi * t), np.full_like(t, 0.4)])
    # out and back, so the first maximum is never the last sample
    vectors = np.vstack([forward, forward[-2::-1]])
    rng = np.random.default_rng(0)
    amap = AlignmentMap(rng.normal(size=(2, 2)), np.zeros(2))
    temp = TemperatureConfig(0.0)
    first = predict_vcp(tiny_model, amap, temp, vectors)
    second = predict_vcp(tiny_model, amap, temp, vectors)
    assert first.lambda_pre == second.lambda_pre
    assert first.aligned_curve == second.aligned_curve


def test_mape_values():
    assert mape([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mape([1.1, 0.9], [1.0, 1.0]) == pytest.approx(0.1)


def test_mape_errors():
    with pytest.raises(DimensionMismatch):
        mape([1.0], [1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        mape([], [])
    with pytest.raises(ZeroReference):
        mape([1.0], [0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 10), st.floats(-1, 1)), min_size=1, max_size=8),
       st.floats(-5, 5))
def test_mape_scales_with_errors(pairs, c):
    actual = np.array([a for a, _ in pairs])
    errors = np.array([e for _, e in pairs])
    base = mape(actual + errors, actual)
    assert mape(actual + c * errors, actual) == pytest.approx(abs(c) * base, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("fraction,label", [
    (0.1, "normal"), (0.5, "watch"), (0.8, "alert"), (0.875, "critical"), (1.0, "critical"), (1.2, "past_nose"),
])
def test_risk_band(fraction, label):
    assert risk_band(fraction) == label
