#!/usr/bin/env python3
"""
Synthetic PMU data: phasor sampling of power flow solutions, white noise,
piecewise load schedules and spatio-temporal measurement windows.
"""

import json
import logging
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from src.continuation import PVCurve
from src.errors import ConfigError, InfeasibleAt, PowerFlowError, ScheduleError, UnobservedBus
from src.grid_case import AdmittanceMatrix, GridCase, build_ybus
from src.power_flow import PowerFlowSolution, SolverOptions, solve_newton

logger = logging.getLogger(__name__)

REPORTING_RATE_HZ = 50.0

# 57/118-bus sets are the published study placements; the 14-bus set is the
# minimum observable placement {2, 6, 7, 9} plus the best-connected bus 4
PLACEMENTS: Dict[str, Tuple[int, ...]] = {
    "case14": (2, 4, 6, 7, 9),
    "case57": (1, 2, 6, 10, 12, 19, 22, 24, 25, 27, 32, 36, 38, 41, 45, 46, 48, 49, 52, 55, 57),
    "case118": (2, 4, 5, 9, 11, 12, 15, 17, 21, 24, 25, 28, 34, 37, 40, 45, 49, 52, 54, 56,
                62, 63, 66, 68, 73, 75, 77, 80, 82, 85, 86, 89, 90, 94, 101, 105, 107, 110, 114),
}


@dataclass(frozen=True)
class PmuPlacement:
    observed_buses: Tuple[int, ...]

    def __post_init__(self):
        if not self.observed_buses:
            raise ConfigError("PMU placement is empty")
        if len(set(self.observed_buses)) != len(self.observed_buses):
            raise ConfigError("PMU placement lists a bus twice")

    @classmethod
    def for_case(cls, name: str) -> "PmuPlacement":
        if name not in PLACEMENTS:
            raise ConfigError(f"no bundled PMU placement for {name}; pass one explicitly")
        return cls(PLACEMENTS[name])

    @property
    def width(self) -> int:
        """Length of one phasor vector"""
        return 2 * len(self.observed_buses)

    def positions(self, bus_ids: Sequence[int]) -> np.ndarray:
        index = {bus_id: i for i, bus_id in enumerate(bus_ids)}
        missing = [b for b in self.observed_buses if b not in index]
        if missing:
            raise UnobservedBus(missing[0])
        return np.array([index[b] for b in self.observed_buses], dtype=int)

    def columns(self) -> List[str]:
        return [f"{b}_vm" for b in self.observed_buses] + [f"{b}_va" for b in self.observed_buses]


@dataclass(frozen=True)
class NoiseModel:
    sigma_mag: float = 1e-3  # pu
    sigma_ang: float = 1e-3  # rad
    seed: int = 0

    def __post_init__(self):
        if self.sigma_mag < 0 or self.sigma_ang < 0:
            raise ConfigError("noise standard deviations must be non-negative")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_pmu(sol: PowerFlowSolution, placement: PmuPlacement, noise: NoiseModel,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """[V_1..V_n, theta_1..theta_n] at the observed buses, with additive white noise"""
    rng = rng if rng is not None else noise.rng()
    idx = placement.positions(sol.bus_ids)
    n = len(idx)
    vm = sol.v_mag[idx] + rng.normal(0.0, noise.sigma_mag, n)
    va = sol.v_ang[idx] + rng.normal(0.0, noise.sigma_ang, n)
    return np.r_[vm, va]


def curve_to_windows(curve: PVCurve, placement: PmuPlacement, noise: NoiseModel,
                     rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    """One phasor vector per curve point, in curve order"""
    rng = rng if rng is not None else noise.rng()
    return [sample_pmu(point.solution, placement, noise, rng) for point in curve.points]


# load schedules

SEGMENT_KINDS = ("constant", "ramp", "step", "random")
Target = Union[int, Tuple[int, ...], str]


@dataclass(frozen=True)
class ScheduleSegment:
    """Demand level on one field of a bus, a bus list or all load buses over [t_from, t_to].

    A ramp starts from `value` at tick t_from - 1 and moves by `rate` per
    tick; constant and step hold `value`. A random segment holds `value` on
    `count` of its target buses drawn once from `seed`, and `rest` (if set)
    on the others. With `relative` the level multiplies the base demand
    instead of replacing it (MW / MVAr).
    """
    t_from: int
    t_to: int
    bus: Target
    field: str = "p"
    kind: str = "constant"
    value: float = 0.0
    rate: float = 0.0
    relative: bool = False
    count: int = 0
    seed: int = 0
    rest: Optional[float] = None

    def __post_init__(self):
        if self.t_to < self.t_from:
            raise ScheduleError(f"segment {self.t_from}-{self.t_to} ends before it starts")
        if self.field not in ("p", "q"):
            raise ScheduleError(f"segment field must be 'p' or 'q', got {self.field!r}")
        if self.kind not in SEGMENT_KINDS:
            raise ScheduleError(f"unknown segment kind {self.kind!r}")
        if isinstance(self.bus, str) and self.bus != "all":
            raise ScheduleError(f"segment target must be a bus, a bus list or 'all', got {self.bus!r}")
        if self.kind == "random" and self.count < 1:
            raise ScheduleError("random segment needs count >= 1")

    @classmethod
    def from_dict(cls, data: Dict) -> "ScheduleSegment":
        try:
            bus = data["bus"]
            if isinstance(bus, list):
                bus = tuple(int(b) for b in bus)
            elif bus != "all":
                bus = int(bus)
            return cls(
                t_from=int(data["t_from"]),
                t_to=int(data["t_to"]),
                bus=bus,
                field=data.get("field", "p"),
                kind=data.get("kind", "constant"),
                value=float(data.get("value", 0.0)),
                rate=float(data.get("rate", 1.0 if data.get("kind") == "ramp" else 0.0)),
                relative=bool(data.get("relative", False)),
                count=int(data.get("count", 0)),
                seed=int(data.get("seed", 0)),
                rest=None if data.get("rest") is None else float(data["rest"]),
            )
        except KeyError as e:
            raise ScheduleError(f"schedule segment is missing {e}") from None
        except (TypeError, ValueError) as e:
            raise ScheduleError(f"bad schedule segment {data!r}: {e}") from None

    def to_dict(self) -> Dict:
        bus = list(self.bus) if isinstance(self.bus, tuple) else self.bus
        out = {"t_from": self.t_from, "t_to": self.t_to, "bus": bus, "field": self.field,
               "kind": self.kind, "value": self.value, "rate": self.rate, "relative": self.relative}
        if self.kind == "random":
            out.update(count=self.count, seed=self.seed, rest=self.rest)
        return out

    def track(self) -> Tuple[Target, str]:
        return self.bus, self.field

    def level(self, t: int) -> float:
        if self.kind == "ramp":
            return self.value + self.rate * (t - self.t_from + 1)
        return self.value

    def targets(self, case: GridCase) -> List[int]:
        if self.bus == "all":
            return case.load_buses()
        buses = list(self.bus) if isinstance(self.bus, tuple) else [self.bus]
        for bus in buses:
            case.position(bus)
        return buses

    def chosen(self, case: GridCase) -> List[int]:
        """Target buses holding `value`; all of them unless the segment is random"""
        pool = self.targets(case)
        if self.kind != "random":
            return pool
        if self.count > len(pool):
            raise ScheduleError(f"random segment wants {self.count} buses, target has {len(pool)}")
        picks = np.random.default_rng(self.seed).choice(len(pool), self.count, replace=False)
        return sorted(pool[i] for i in picks)

    def levels(self, case: GridCase, t: int) -> Dict[int, float]:
        """bus id -> level at tick t, before any relative scaling"""
        chosen = set(self.chosen(case))
        out = {}
        for bus_id in self.targets(case):
            if bus_id in chosen:
                out[bus_id] = self.level(t)
            elif self.rest is not None:
                out[bus_id] = self.rest
        return out


@dataclass(frozen=True)
class LoadSchedule:
    segments: Tuple[ScheduleSegment, ...]

    def __post_init__(self):
        if not self.segments:
            raise ScheduleError("schedule has no segments")
        spans = set()
        for track, segs in self.tracks().items():
            for prev, nxt in zip(segs, segs[1:]):
                if nxt.t_from <= prev.t_to:
                    raise ScheduleError(f"segments overlap on {track} at tick {nxt.t_from}")
                if nxt.t_from != prev.t_to + 1:
                    raise ScheduleError(f"gap on {track} between ticks {prev.t_to} and {nxt.t_from}")
            spans.add((segs[0].t_from, segs[-1].t_to))
        if len(spans) != 1:
            raise ScheduleError(f"schedule tracks cover different tick ranges: {sorted(spans)}")

    def tracks(self) -> Dict[Tuple[Target, str], List[ScheduleSegment]]:
        out: Dict[Tuple[Target, str], List[ScheduleSegment]] = {}
        for seg in self.segments:
            out.setdefault(seg.track(), []).append(seg)
        return {track: sorted(segs, key=lambda s: s.t_from) for track, segs in out.items()}

    @property
    def t_start(self) -> int:
        return min(s.t_from for s in self.segments)

    @property
    def t_end(self) -> int:
        return max(s.t_to for s in self.segments)

    @property
    def ticks(self) -> range:
        return range(self.t_start, self.t_end + 1)

    def active(self, t: int) -> List[ScheduleSegment]:
        return [s for s in self.segments if s.t_from <= t <= s.t_to]

    def case_at(self, case: GridCase, t: int) -> GridCase:
        """Base case with the demand the schedule prescribes at tick t"""
        overrides: Dict[Tuple[int, str], float] = {}
        for seg in self.active(t):
            for bus_id, level in seg.levels(case, t).items():
                key = (bus_id, seg.field)
                if key in overrides:
                    raise ScheduleError(f"bus {bus_id} field {seg.field} scheduled twice at tick {t}")
                base = case.bus(bus_id).p_demand if seg.field == "p" else case.bus(bus_id).q_demand
                overrides[key] = level * base if seg.relative else level

        if not overrides:
            return case
        buses = tuple(
            replace(bus,
                    p_demand=overrides.get((bus.id, "p"), bus.p_demand),
                    q_demand=overrides.get((bus.id, "q"), bus.q_demand))
            for bus in case.buses
        )
        return replace(case, buses=buses)

    @classmethod
    def from_list(cls, items: Iterable[Dict]) -> "LoadSchedule":
        return cls(tuple(ScheduleSegment.from_dict(item) for item in items))

    @classmethod
    def load(cls, path: str) -> "LoadSchedule":
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ScheduleError(f"could not read schedule {path}: {e}") from None
        if isinstance(data, dict):
            data = data.get("segments", [])
        return cls.from_list(data)

    def to_list(self) -> List[Dict]:
        return [seg.to_dict() for seg in self.segments]


@dataclass(frozen=True, eq=False)
class MeasurementWindow:
    """Rows are ticks in chronological order, columns the phasor vector entries"""
    values: np.ndarray
    buses: Tuple[int, ...]
    ticks: np.ndarray
    dt: float = 1.0 / REPORTING_RATE_HZ
    events: Tuple[Tuple[int, int, str], ...] = ()

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[1] != 2 * len(self.buses):
            raise ConfigError("window values must be ticks x (2 * observed buses)")
        if len(self.ticks) != self.values.shape[0]:
            raise ConfigError("one tick label per window row required")
        if np.any(np.diff(self.ticks) <= 0):
            raise ConfigError("window ticks must be strictly increasing")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def columns(self) -> List[np.ndarray]:
        return list(self.values)

    @property
    def t_start(self) -> float:
        return float(self.ticks[0] * self.dt) if len(self.ticks) else 0.0

    @property
    def matrix(self) -> np.ndarray:
        """Spatio-temporal data matrix X = [V^1 ... V^T] (entries x ticks)"""
        return self.values.T


def replay_schedule(case: GridCase, schedule: LoadSchedule, placement: PmuPlacement,
                    noise: NoiseModel, y: Optional[AdmittanceMatrix] = None,
                    opts: Optional[SolverOptions] = None) -> MeasurementWindow:
    """One noisy phasor vector per schedule tick, warm-starting each solve from the last"""
    placement.positions(case.bus_ids)
    y = y or build_ybus(case)
    opts = opts or SolverOptions()
    rng = noise.rng()

    rows = []
    events = []
    v, q_state = None, {}
    for t in schedule.ticks:
        loaded = schedule.case_at(case, t)
        try:
            sol = solve_newton(loaded, y, opts, v0=v, q_state=q_state)
        except PowerFlowError as e:
            raise InfeasibleAt(t, getattr(e, "reason", str(e))) from e
        for event in sol.events:
            logger.info("t=%d: bus %s reactive limit %s", t, event.bus, event.action)
            events.append((t, event.bus, event.action))
        rows.append(sample_pmu(sol, placement, noise, rng))
        v, q_state = sol.voltage, sol.q_state

    logger.debug("Replayed %d ticks, %d reactive-limit events", len(rows), len(events))
    return MeasurementWindow(
        values=np.array(rows),
        buses=placement.observed_buses,
        ticks=np.array(list(schedule.ticks), dtype=int),
        events=tuple(events),
    )


def split_windows(window: MeasurementWindow, length: int, stride: int = 1) -> List[MeasurementWindow]:
    """Consecutive sub-windows of `length` ticks every `stride` ticks"""
    if length < 1 or stride < 1:
        raise ConfigError("window length and stride must be at least 1")
    out = []
    for start in range(0, len(window) - length + 1, stride):
        stop = start + length
        out.append(MeasurementWindow(
            values=window.values[start:stop],
            buses=window.buses,
            ticks=window.ticks[start:stop],
            dt=window.dt,
            events=tuple(e for e in window.events if window.ticks[start] <= e[0] <= window.ticks[stop - 1]),
        ))
    return out


def window_to_frame(window: MeasurementWindow) -> pd.DataFrame:
    """Measurement stream table: t, <bus>_vm..., <bus>_va..."""
    columns = PmuPlacement(window.buses).columns()
    frame = pd.DataFrame(window.values, columns=columns)
    frame.insert(0, "t", window.ticks)
    return frame


def frame_to_window(frame: pd.DataFrame, dt: float = 1.0 / REPORTING_RATE_HZ) -> MeasurementWindow:
    if "t" not in frame.columns:
        raise ConfigError("measurement table needs a 't' column")
    vm_cols = [c for c in frame.columns if c.endswith("_vm")]
    va_cols = [c for c in frame.columns if c.endswith("_va")]
    buses = tuple(int(c[:-3]) for c in vm_cols)
    if tuple(int(c[:-3]) for c in va_cols) != buses:
        raise ConfigError("magnitude and angle columns must list the same buses in the same order")
    return MeasurementWindow(
        values=frame[vm_cols + va_cols].to_numpy(dtype=float),
        buses=buses,
        ticks=frame["t"].to_numpy(dtype=int),
        dt=dt,
    )
