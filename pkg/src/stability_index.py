#!/usr/bin/env python3
"""
Stability index built on a trained VAE.

Latent features are drawn with reduced variance (temperature phi), mapped
onto (loading factor, voltage) coordinates by a least-squares alignment, and
read off for the voltage collapse point: the largest aligned loading factor
seen along a replayed trajectory.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import qr, solve_triangular

from src.errors import (ConfigError, DimensionMismatch, InsufficientExcursion, RankDeficient,
                        ToolkitError, ZeroReference)
from src.vae import VaeModel, encode_batch

logger = logging.getLogger(__name__)

RANK_TOLERANCE = 1e-10

# (lower bound on lambda / lambda_max, label), checked top down
RISK_BANDS: Tuple[Tuple[float, str], ...] = (
    (0.875, "critical"),
    (0.75, "alert"),
    (0.5, "watch"),
    (float("-inf"), "normal"),
)


@dataclass(frozen=True)
class TemperatureConfig:
    phi: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.phi <= 1.0:
            raise ConfigError(f"temperature phi must lie in [0, 1], got {self.phi}")


@dataclass(frozen=True, eq=False)
class Feature:
    z_hat: np.ndarray
    mu: np.ndarray
    var: np.ndarray


@dataclass(frozen=True, eq=False)
class AlignmentMap:
    """(lambda, v) ~ z @ beta + intercept"""
    beta: np.ndarray
    intercept: np.ndarray

    def __post_init__(self):
        if self.beta.ndim != 2 or self.beta.shape[1] != 2 or self.intercept.shape != (2,):
            raise DimensionMismatch("alignment needs a (latent x 2) beta and a length-2 intercept")
        if not (np.all(np.isfinite(self.beta)) and np.all(np.isfinite(self.intercept))):
            raise ConfigError("alignment coefficients must be finite")

    @classmethod
    def identity(cls, latent_dim: int = 2) -> "AlignmentMap":
        return cls(np.eye(latent_dim, 2), np.zeros(2))

    def to_dict(self):
        return {"beta": self.beta.tolist(), "intercept": self.intercept.tolist()}

    @classmethod
    def from_dict(cls, data) -> "AlignmentMap":
        return cls(np.asarray(data["beta"], dtype=float),
                   np.asarray(data.get("intercept", [0.0, 0.0]), dtype=float))


@dataclass(frozen=True, eq=False)
class VcpEstimate:
    lambda_pre: float
    nose_sample_index: int
    aligned_curve: List[Tuple[float, float]]


@dataclass(frozen=True)
class MonitorRecord:
    t: int
    z: Tuple[float, ...]
    lambda_hat: float
    v_hat: float
    error: Optional[str] = None


def reduce_variance(var: np.ndarray, phi: float) -> np.ndarray:
    return np.asarray(var, dtype=float) * TemperatureConfig(phi).phi


def extract_features(model: VaeModel, x_raw: np.ndarray, temp: TemperatureConfig,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One reduced-variance latent draw per raw phasor row"""
    x_raw = np.atleast_2d(np.asarray(x_raw, dtype=float))
    if x_raw.shape[1] != model.input_dim:
        raise DimensionMismatch(f"model expects {model.input_dim} phasor entries, got {x_raw.shape[1]}")
    mu, var = encode_batch(model, model.norm_stats.normalize(x_raw))
    if temp.phi == 0.0:
        return mu
    rng = rng if rng is not None else np.random.default_rng()
    return mu + np.sqrt(reduce_variance(var, temp.phi)) * rng.standard_normal(mu.shape)


def extract_feature(model: VaeModel, x_raw: np.ndarray, temp: TemperatureConfig,
                    rng: Optional[np.random.Generator] = None) -> Feature:
    x_raw = np.asarray(x_raw, dtype=float)
    if x_raw.ndim != 1:
        raise DimensionMismatch("extract_feature takes a single phasor vector")
    if x_raw.shape[0] != model.input_dim:
        raise DimensionMismatch(f"model expects {model.input_dim} phasor entries, got {x_raw.shape[0]}")
    mu, var = encode_batch(model, model.norm_stats.normalize(x_raw))
    var_hat = reduce_variance(var[0], temp.phi)
    if temp.phi == 0.0:
        z_hat = mu[0]
    else:
        rng = rng if rng is not None else np.random.default_rng()
        z_hat = mu[0] + np.sqrt(var_hat) * rng.standard_normal(mu.shape[1])
    return Feature(z_hat=z_hat, mu=mu[0], var=var_hat)


def fit_alignment(features: np.ndarray, reference: np.ndarray, fit_intercept: bool = False) -> AlignmentMap:
    """Least-squares beta for reference ~ features @ beta (+ intercept), via QR"""
    z = np.atleast_2d(np.asarray(features, dtype=float))
    c = np.atleast_2d(np.asarray(reference, dtype=float))
    if z.shape[0] != c.shape[0]:
        raise DimensionMismatch(f"{z.shape[0]} feature rows but {c.shape[0]} reference rows")
    if c.shape[1] != 2:
        raise DimensionMismatch("reference rows must be (lambda, v) pairs")
    design = np.hstack([z, np.ones((z.shape[0], 1))]) if fit_intercept else z
    if design.shape[0] < max(2, design.shape[1]):
        raise RankDeficient(f"only {design.shape[0]} rows for {design.shape[1]} coefficients")

    q, r = qr(design, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.max() == 0 or diag.min() <= RANK_TOLERANCE * diag.max():
        raise RankDeficient()
    coef = solve_triangular(r, q.T @ c)

    if fit_intercept:
        amap = AlignmentMap(coef[:-1], coef[-1])
    else:
        amap = AlignmentMap(coef, np.zeros(2))
    residual = design @ coef - c
    logger.info("Alignment fitted on %d rows, rms residual %.4g", len(z), float(np.sqrt(np.mean(residual ** 2))))
    return amap


def align(amap: AlignmentMap, z_hat: np.ndarray) -> Tuple[float, float]:
    z_hat = np.asarray(z_hat.z_hat if isinstance(z_hat, Feature) else z_hat, dtype=float)
    if z_hat.shape != (amap.beta.shape[0],):
        raise DimensionMismatch(f"feature length {z_hat.shape} does not match alignment {amap.beta.shape[0]}")
    lam, v = z_hat @ amap.beta + amap.intercept
    return float(lam), float(v)


def align_batch(amap: AlignmentMap, z: np.ndarray) -> np.ndarray:
    return np.atleast_2d(z) @ amap.beta + amap.intercept


def tick_rng(seed: int, t: int) -> np.random.Generator:
    """Random stream owned by one tick, so outputs do not depend on tick order"""
    return np.random.default_rng([seed, int(t)])


def monitor_stream(model: VaeModel, amap: AlignmentMap, temp: TemperatureConfig,
                   stream: Iterable[Tuple[int, np.ndarray]], seed: int = 0) -> Iterator[MonitorRecord]:
    """One record per (t, raw phasor vector); a failing tick yields a NaN record and the stream goes on"""
    for t, x in stream:
        try:
            feature = extract_feature(model, x, temp, tick_rng(seed, t))
            lam, v = align(amap, feature)
            yield MonitorRecord(int(t), tuple(float(z) for z in feature.z_hat), lam, v)
        except ToolkitError as e:
            logger.warning("t=%s: %s", t, e)
            nan = float("nan")
            yield MonitorRecord(int(t), (nan,) * model.latent_dim, nan, nan, error=str(e))


def records_to_frame(records: Iterable[MonitorRecord]) -> pd.DataFrame:
    """Monitoring output table: t, z1..zk, lambda_hat, v_hat"""
    rows = []
    for rec in records:
        row = {"t": rec.t}
        row.update({f"z{i + 1}": z for i, z in enumerate(rec.z)})
        row.update({"lambda_hat": rec.lambda_hat, "v_hat": rec.v_hat})
        rows.append(row)
    return pd.DataFrame(rows)


def estimate_vcp(aligned_series: Sequence[Tuple[float, float]]) -> VcpEstimate:
    series = [(float(lam), float(v)) for lam, v in aligned_series]
    if not series:
        raise InsufficientExcursion("empty aligned series")
    lams = np.array([lam for lam, _ in series])
    index = int(np.argmax(lams))
    if index == len(series) - 1:
        raise InsufficientExcursion(
            f"aligned lambda still rising at the last of {len(series)} samples; nose not bracketed")
    return VcpEstimate(lambda_pre=float(lams[index]), nose_sample_index=index, aligned_curve=series)


def predict_vcp(model: VaeModel, amap: AlignmentMap, temp: TemperatureConfig,
                vectors: np.ndarray, seed: int = 0) -> VcpEstimate:
    """Replay raw phasor vectors in order and read the collapse point off the aligned feature curve"""
    z = np.vstack([extract_feature(model, x, temp, tick_rng(seed, t)).z_hat for t, x in enumerate(vectors)])
    return estimate_vcp([tuple(row) for row in align_batch(amap, z)])


def mape(predicted: Sequence[float], actual: Sequence[float]) -> float:
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if predicted.shape != actual.shape or predicted.ndim != 1 or len(actual) == 0:
        raise DimensionMismatch(f"mape needs equal non-empty lists, got {predicted.shape} and {actual.shape}")
    if np.any(actual <= 0):
        raise ZeroReference("actual collapse points must be positive")
    return float(np.mean(np.abs(predicted - actual) / actual))


def risk_band(fraction: float) -> str:
    """Label for lambda / lambda_max"""
    if fraction > 1.0:
        return "past_nose"
    for low, label in RISK_BANDS:
        if fraction >= low:
            return label
    return "normal"
