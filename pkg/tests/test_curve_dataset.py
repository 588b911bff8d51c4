import os

import numpy as np
import pandas as pd
import pytest

from src.continuation import ContinuationOptions, LoadDirection, trace_pv_curve
from src.curve_dataset import (
    CurveDatasetManager,
    candidate_buses,
    curve_measurements,
    dli_directions,
    is_evaluation_direction,
    random_direction,
    reference_voltage,
    sli_directions,
)
from src.errors import ConfigError, EmptyRequest
from src.pmu_synth import NoiseModel, PmuPlacement

CASE14_LOADS = [4, 5, 9, 10, 11, 12, 13, 14]


def test_candidate_buses(case14):
    assert candidate_buses(case14, "p") == CASE14_LOADS
    # bus 4 draws negative reactive power
    assert candidate_buses(case14, "q") == [5, 9, 10, 11, 12, 13, 14]


def test_sli_directions(case14):
    directions = sli_directions(case14)
    assert [d.buses() for d in directions] == [[b] for b in CASE14_LOADS]
    assert all(is_evaluation_direction(d) for d in directions)


def test_dli_directions(case14):
    assert len(dli_directions(case14)) == 28
    picked = dli_directions(case14, max_pairs=5, seed=3)
    assert len(picked) == 5
    assert [d.to_dict() for d in picked] == [d.to_dict() for d in dli_directions(case14, max_pairs=5, seed=3)]
    assert all(len(d.k_p) == 2 for d in picked)


def test_evaluation_patterns():
    assert is_evaluation_direction(LoadDirection(k_p={4: 1.0}))
    assert is_evaluation_direction(LoadDirection(k_p={4: 1.0, 9: 1.0}))
    assert not is_evaluation_direction(LoadDirection(k_p={4: 1.0, 9: 1.0, 14: 1.0}))
    assert not is_evaluation_direction(LoadDirection(k_q={4: 1.0}))


@pytest.mark.parametrize("max_nodes", [1, 2, 3, 5])
def test_random_directions_avoid_evaluation_patterns(case14, max_nodes):
    rng = np.random.default_rng(max_nodes)
    for _ in range(200):
        direction = random_direction(case14, rng, max_nodes)
        assert not is_evaluation_direction(direction)
        assert 1 <= len(direction.buses()) <= max_nodes
        assert bool(direction.k_p) != bool(direction.k_q)


def test_random_direction_needs_nodes(case14):
    with pytest.raises(ConfigError):
        random_direction(case14, np.random.default_rng(0), 0)


def test_curve_measurements(case14):
    direction = LoadDirection(k_p={9: 1.0, 14: 1.0})
    curve = trace_pv_curve(case14, direction, ContinuationOptions(max_points=2000))
    placement = PmuPlacement.for_case("case14")
    frame = curve_measurements(curve, placement, NoiseModel(0.0, 0.0), np.random.default_rng(0))
    assert list(frame.columns) == ["lambda", "v_ref"] + placement.columns()
    assert len(frame) == len(curve)
    v_ref = reference_voltage(curve)
    assert v_ref[0] == pytest.approx((curve.voltages(9)[0] + curve.voltages(14)[0]) / 2)
    assert frame["v_ref"].iloc[curve.nose_index] < frame["v_ref"].iloc[0]


def test_empty_request(tmp_path, case14):
    manager = CurveDatasetManager(str(tmp_path))
    with pytest.raises(EmptyRequest):
        manager.generate(case14, PmuPlacement.for_case("case14"), 0, 3)


def test_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        CurveDatasetManager(str(tmp_path)).load_manifest()


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory, case14):
    out = tmp_path_factory.mktemp("dataset")
    manager = CurveDatasetManager(str(out))
    manager.generate(case14, PmuPlacement.for_case("case14"), n_curves=2, max_nodes=3, seed=5)
    return manager


def test_generated_manifest(small_dataset):
    manifest = CurveDatasetManager(small_dataset.out_dir).load_manifest()
    assert manifest["case"] == "case14"
    assert manifest["placement"] == [2, 4, 6, 7, 9]
    assert len(manifest["curves"]) == 2
    for entry in manifest["curves"]:
        path = os.path.join(small_dataset.out_dir, entry["file"])
        assert os.path.exists(path)
        assert len(pd.read_csv(path)) == entry["points"]
        assert entry["lambda_max"] > 0
        assert 0 < entry["nose_index"] < entry["points"] - 1
        assert not is_evaluation_direction(LoadDirection.from_dict(entry["direction"]))


def test_training_arrays(small_dataset):
    x, c = small_dataset.training_arrays()
    points = sum(entry["points"] for entry in small_dataset.manifest["curves"])
    assert x.shape == (points, 10)
    assert c.shape == (points, 2)
    assert c[0, 0] == 0.0


def test_generation_is_reproducible(tmp_path, case14, small_dataset):
    again = CurveDatasetManager(str(tmp_path))
    manifest = again.generate(case14, PmuPlacement.for_case("case14"), n_curves=2, max_nodes=3, seed=5)
    assert manifest == small_dataset.manifest
    for first, second in zip(small_dataset.curve_frames(), again.curve_frames()):
        pd.testing.assert_frame_equal(first, second)
