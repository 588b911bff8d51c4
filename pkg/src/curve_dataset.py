#!/usr/bin/env python3
"""
Training-set generation from random P-V curves.

Each curve grows the demand of 1..max_nodes randomly chosen load buses
(all on active or all on reactive power) and is traced through the nose;
every curve point becomes one noisy PMU phasor vector plus its (lambda,
voltage) reference. Directions used for collapse-point evaluation (one or
two buses on active power) are never drawn for training.
"""

import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.continuation import ContinuationOptions, LoadDirection, PVCurve, trace_pv_curve
from src.errors import ConfigError, ContinuationError, DatasetError, EmptyRequest, PowerFlowError
from src.grid_case import BusKind, GridCase, build_ybus
from src.pmu_synth import NoiseModel, PmuPlacement, sample_pmu

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
MAX_DIRECTION_DRAWS = 1000


def candidate_buses(case: GridCase, field_name: str) -> List[int]:
    """PQ buses with a positive base demand on the given field"""
    attr = "p_demand" if field_name == "p" else "q_demand"
    return [bus.id for bus in case.buses if bus.kind is BusKind.PQ and getattr(bus, attr) > 0]


def is_evaluation_direction(direction: LoadDirection) -> bool:
    """Single- or two-bus active-power growth, the collapse-point evaluation patterns"""
    return not direction.k_q and not direction.k_g and len(direction.k_p) in (1, 2)


def random_direction(case: GridCase, rng: np.random.Generator, max_nodes: int,
                     exclude_evaluation: bool = True) -> LoadDirection:
    if max_nodes < 1:
        raise ConfigError("max_nodes must be at least 1")
    for _ in range(MAX_DIRECTION_DRAWS):
        field_name = "p" if rng.random() < 0.5 else "q"
        pool = candidate_buses(case, field_name)
        if not pool:
            continue
        n_nodes = int(rng.integers(1, min(max_nodes, len(pool)) + 1))
        buses = sorted(int(b) for b in rng.choice(pool, size=n_nodes, replace=False))
        factors = {bus: 1.0 for bus in buses}
        direction = LoadDirection(k_p=factors) if field_name == "p" else LoadDirection(k_q=factors)
        if exclude_evaluation and is_evaluation_direction(direction):
            continue
        return direction
    raise ConfigError(f"no admissible random direction on {case.name} with max_nodes={max_nodes}")


def sli_directions(case: GridCase) -> List[LoadDirection]:
    return [LoadDirection.single(bus, "p") for bus in candidate_buses(case, "p")]


def dli_directions(case: GridCase, max_pairs: Optional[int] = None, seed: int = 0) -> List[LoadDirection]:
    pairs = list(itertools.combinations(candidate_buses(case, "p"), 2))
    if max_pairs is not None and max_pairs < len(pairs):
        picked = np.random.default_rng(seed).choice(len(pairs), size=max_pairs, replace=False)
        pairs = [pairs[i] for i in sorted(picked)]
    return [LoadDirection(k_p={a: 1.0, b: 1.0}) for a, b in pairs]


def reference_voltage(curve: PVCurve) -> np.ndarray:
    """Mean voltage magnitude of the loaded buses at each curve point"""
    return np.mean([curve.voltages(bus) for bus in curve.direction.buses()], axis=0)


def curve_measurements(curve: PVCurve, placement: PmuPlacement, noise: NoiseModel,
                       rng: np.random.Generator) -> pd.DataFrame:
    """Curve table: lambda, v_ref and one noisy phasor vector per point"""
    rows = np.vstack([sample_pmu(p.solution, placement, noise, rng) for p in curve.points])
    frame = pd.DataFrame(rows, columns=placement.columns())
    frame.insert(0, "v_ref", reference_voltage(curve))
    frame.insert(0, "lambda", curve.lambdas)
    return frame


@dataclass
class TraceJob:
    """One curve attempt; picklable for worker processes"""
    attempt: int
    case: GridCase
    direction: LoadDirection
    placement: PmuPlacement
    noise: NoiseModel
    seed: np.random.SeedSequence
    options: ContinuationOptions = field(default_factory=ContinuationOptions)


@dataclass
class TraceResult:
    attempt: int
    direction: LoadDirection
    frame: Optional[pd.DataFrame] = None
    lambda_max: float = float("nan")
    limit_induced_nose: bool = False
    nose_index: int = -1
    error: Optional[str] = None


def run_trace_job(job: TraceJob) -> TraceResult:
    try:
        curve = trace_pv_curve(job.case, job.direction, job.options, build_ybus(job.case))
    except (ContinuationError, PowerFlowError) as e:
        return TraceResult(job.attempt, job.direction, error=str(e))
    if curve.nose_index == len(curve) - 1:
        return TraceResult(job.attempt, job.direction,
                           error="curve ends at its nose with no lower branch")
    frame = curve_measurements(curve, job.placement, job.noise, np.random.default_rng(job.seed))
    return TraceResult(job.attempt, job.direction, frame, curve.lambda_max,
                       curve.limit_induced_nose, curve.nose_index)


def run_jobs(jobs: List[TraceJob], workers: int = 1) -> List[TraceResult]:
    """Results in job order; worker count does not change them"""
    if workers <= 1 or len(jobs) <= 1:
        return [run_trace_job(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_trace_job, jobs))


class CurveDatasetManager:
    """Curve CSV files plus a manifest in one directory"""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.manifest: Dict[str, Any] = {}

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.out_dir, MANIFEST_FILE)

    def load_manifest(self) -> Dict[str, Any]:
        if not os.path.exists(self.manifest_path):
            raise ConfigError(f"no dataset manifest at {self.manifest_path}")
        with open(self.manifest_path, "r") as f:
            self.manifest = json.load(f)
        logger.info("Loaded dataset manifest with %d curves", len(self.manifest.get("curves", [])))
        return self.manifest

    def save_manifest(self) -> None:
        os.makedirs(self.out_dir, exist_ok=True)
        with open(self.manifest_path, "w") as f:
            json.dump(self.manifest, f, indent=2)

    def generate(self, case: GridCase, placement: PmuPlacement, n_curves: int, max_nodes: int,
                 seed: int = 0, noise: Optional[NoiseModel] = None,
                 options: Optional[ContinuationOptions] = None, workers: int = 1,
                 failure_cap: Optional[int] = None) -> Dict[str, Any]:
        """Trace n_curves random curves; failed attempts are logged and replaced up to the failure cap"""
        if n_curves <= 0:
            raise EmptyRequest("dataset generation needs at least one curve")
        placement.positions(case.bus_ids)
        noise = noise or NoiseModel(seed=seed)
        options = options or ContinuationOptions()
        cap = failure_cap if failure_cap is not None else max(5, n_curves // 4)

        root = np.random.SeedSequence(seed)
        direction_rng = np.random.default_rng(root.spawn(1)[0])
        accepted: List[TraceResult] = []
        failures: List[TraceResult] = []
        attempt = 0

        while len(accepted) < n_curves:
            need = n_curves - len(accepted)
            jobs = []
            for child in root.spawn(need):
                jobs.append(TraceJob(attempt, case, random_direction(case, direction_rng, max_nodes),
                                     placement, noise, child, options))
                attempt += 1
            for result in run_jobs(jobs, workers):
                if result.error is None:
                    accepted.append(result)
                    logger.info("curve %d/%d: %s lambda_max=%.4f (%d points)", len(accepted), n_curves,
                                result.direction.describe(), result.lambda_max, len(result.frame))
                else:
                    failures.append(result)
                    logger.warning("attempt %d (%s) skipped: %s", result.attempt,
                                   result.direction.describe(), result.error)
            if len(failures) > cap:
                raise DatasetError(f"{len(failures)} failed curves exceed the cap of {cap}")

        os.makedirs(self.out_dir, exist_ok=True)
        curves = []
        for index, result in enumerate(accepted):
            file_name = f"curve_{index:04d}.csv"
            result.frame.to_csv(os.path.join(self.out_dir, file_name), index=False)
            curves.append({
                "index": index,
                "attempt": result.attempt,
                "direction": result.direction.to_dict(),
                "label": result.direction.describe(),
                "lambda_max": result.lambda_max,
                "nose_index": result.nose_index,
                "limit_induced_nose": result.limit_induced_nose,
                "points": len(result.frame),
                "file": file_name,
            })

        self.manifest = {
            "case": case.name,
            "seed": seed,
            "n_curves": n_curves,
            "max_nodes": max_nodes,
            "placement": list(placement.observed_buses),
            "noise": {"sigma_mag": noise.sigma_mag, "sigma_ang": noise.sigma_ang, "seed": noise.seed},
            "curves": curves,
            "failures": [{"attempt": r.attempt, "direction": r.direction.to_dict(), "error": r.error}
                         for r in failures],
        }
        self.save_manifest()
        return self.manifest

    def curve_frames(self) -> List[pd.DataFrame]:
        if not self.manifest:
            self.load_manifest()
        return [pd.read_csv(os.path.join(self.out_dir, entry["file"])) for entry in self.manifest["curves"]]

    def training_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Stacked phasor rows X and their (lambda, v_ref) references C over all curves"""
        frames = self.curve_frames()
        if not frames:
            raise EmptyRequest("dataset holds no curves")
        columns = PmuPlacement(tuple(self.manifest["placement"])).columns()
        x = np.vstack([frame[columns].to_numpy(dtype=float) for frame in frames])
        c = np.vstack([frame[["lambda", "v_ref"]].to_numpy(dtype=float) for frame in frames])
        return x, c
