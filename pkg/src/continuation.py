#!/usr/bin/env python3
"""
Continuation power flow: P-V curve tracing along a load-increment direction.

Predictor-corrector scheme on the power flow equations augmented with the
loading factor lambda. The predictor follows the unit tangent; the corrector
is Newton with one coordinate pinned (lambda far from the nose, the fastest
moving voltage magnitude near it). Reactive limits reuse the power flow's
PV -> PQ switching and are recorded on the curve points.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp

from src.errors import (
    BaseCaseInfeasible, ConfigError, ContinuationError, NoseNotReached,
    PowerFlowError, TraceStalled,
)
from src.grid_case import AdmittanceMatrix, GridCase, build_ybus
from src.power_flow import (
    PowerFlowSolution, SolverOptions, build_jacobian,
    effective_sets, make_sbus, make_solution, power_mismatch,
    q_limit_changes, solve_linear, solve_newton,
)

logger = logging.getLogger(__name__)

EASY_CORRECTION = 3  # corrector iterations that still count as an easy step
MAX_SWEEP_LAMBDA = 1e3


@dataclass(frozen=True)
class LoadDirection:
    """Multiplicative increase rates: bus id -> k for demand, generator index -> k for output"""
    k_p: Dict[int, float] = field(default_factory=dict)
    k_q: Dict[int, float] = field(default_factory=dict)
    k_g: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        factors = list(self.k_p.values()) + list(self.k_q.values()) + list(self.k_g.values())
        if not all(math.isfinite(k) for k in factors):
            raise ConfigError("load direction factors must be finite")
        if not any(k != 0.0 for k in factors):
            raise ConfigError("load direction needs at least one nonzero factor")

    @classmethod
    def single(cls, bus: int, field_name: str = "p", k: float = 1.0) -> "LoadDirection":
        if field_name == "p":
            return cls(k_p={bus: k})
        if field_name == "q":
            return cls(k_q={bus: k})
        raise ConfigError(f"unknown demand field {field_name!r}")

    @classmethod
    def parse(cls, text: str) -> "LoadDirection":
        """Compact form `4:p=1,5:q=0.5,g1=0.2`"""
        k_p, k_q, k_g = {}, {}, {}
        for token in filter(None, (t.strip() for t in text.split(","))):
            try:
                target, value = token.split("=")
                if target.startswith("g"):
                    k_g[int(target[1:])] = float(value)
                    continue
                bus, field_name = target.split(":")
                {"p": k_p, "q": k_q}[field_name.strip()][int(bus)] = float(value)
            except (ValueError, KeyError):
                raise ConfigError(f"bad direction term {token!r}") from None
        return cls(k_p=k_p, k_q=k_q, k_g=k_g)

    @classmethod
    def from_dict(cls, data: Dict) -> "LoadDirection":
        return cls(**{
            name: {int(key): float(value) for key, value in data.get(name, {}).items()}
            for name in ("k_p", "k_q", "k_g")
        })

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {name: {str(key): value for key, value in getattr(self, name).items()}
                for name in ("k_p", "k_q", "k_g")}

    def describe(self) -> str:
        terms = [f"{bus}:p={k:g}" for bus, k in self.k_p.items()]
        terms += [f"{bus}:q={k:g}" for bus, k in self.k_q.items()]
        terms += [f"g{gen}={k:g}" for gen, k in self.k_g.items()]
        return ",".join(terms)

    def scaled(self, factor: float) -> "LoadDirection":
        return LoadDirection(
            k_p={b: k * factor for b, k in self.k_p.items()},
            k_q={b: k * factor for b, k in self.k_q.items()},
            k_g={g: k * factor for g, k in self.k_g.items()},
        )

    def buses(self) -> List[int]:
        return sorted(set(self.k_p) | set(self.k_q))


@dataclass(frozen=True)
class ContinuationOptions:
    initial_step: float = 0.05
    min_step: float = 1e-4
    max_points: int = 500
    trace_lower_branch: bool = True
    lower_branch_fraction: float = 0.25
    nose_refine_step: float = 1e-3
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if not 0 < self.min_step <= self.initial_step:
            raise ConfigError("continuation steps need 0 < min_step <= initial_step")
        if self.max_points < 1:
            raise ConfigError("max_points must be at least 1")


@dataclass(frozen=True, eq=False)
class CurvePoint:
    lam: float
    solution: PowerFlowSolution

    @property
    def events(self):
        return self.solution.events


@dataclass(frozen=True, eq=False)
class PVCurve:
    points: List[CurvePoint]
    nose_index: int
    direction: LoadDirection
    limit_induced_nose: bool = False

    def __len__(self) -> int:
        return len(self.points)

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    @property
    def lambda_max(self) -> float:
        return self.points[self.nose_index].lam

    def voltages(self, bus: int) -> np.ndarray:
        return np.array([p.solution.vm_at(bus) for p in self.points])

    def switch_events(self) -> List[Tuple[float, int, str]]:
        return [(p.lam, e.bus, e.action) for p in self.points for e in p.events]


def apply_lambda(case: GridCase, direction: LoadDirection, lam: float) -> GridCase:
    """Copy of the case with demand and generation scaled by (1 + lambda * k)"""
    for bus in direction.buses():
        case.position(bus)
    if any(not 0 <= g < len(case.gens) for g in direction.k_g):
        raise ConfigError(f"generator index out of range in direction {direction.describe()}")

    buses = tuple(
        replace(bus,
                p_demand=bus.p_demand * (1 + lam * direction.k_p.get(bus.id, 0.0)),
                q_demand=bus.q_demand * (1 + lam * direction.k_q.get(bus.id, 0.0)))
        if bus.id in direction.k_p or bus.id in direction.k_q else bus
        for bus in case.buses
    )
    gens = tuple(
        replace(gen, p_out=gen.p_out * (1 + lam * direction.k_g[g])) if g in direction.k_g else gen
        for g, gen in enumerate(case.gens)
    )
    return replace(case, buses=buses, gens=gens)


def delta_sbus(case: GridCase, direction: LoadDirection) -> np.ndarray:
    """d(Sbus)/d(lambda) in per-unit"""
    ds = np.zeros(case.n_bus, dtype=complex)
    for bus_id, k in direction.k_p.items():
        ds[case.position(bus_id)] -= k * case.bus(bus_id).p_demand
    for bus_id, k in direction.k_q.items():
        ds[case.position(bus_id)] -= 1j * k * case.bus(bus_id).q_demand
    for g, k in direction.k_g.items():
        gen = case.gens[g]
        if gen.status:
            ds[case.position(gen.bus)] += k * gen.p_out
    return ds / case.base_mva


class _Frame:
    """Variable layout [angles at PV+PQ, magnitudes at PQ, lambda] for one set of bus types"""

    def __init__(self, case: GridCase, q_state: Dict[int, str]):
        _, self.pv, self.pq = effective_sets(case, q_state)
        self.pvpq = np.r_[self.pv, self.pq]
        self.n = case.n_bus
        self.size = len(self.pvpq) + len(self.pq) + 1
        self.lam_index = self.size - 1

    def pack(self, v: np.ndarray, lam: float) -> np.ndarray:
        return np.r_[np.angle(v)[self.pvpq], np.abs(v)[self.pq], lam]

    def unpack(self, x: np.ndarray, v_ref: np.ndarray) -> Tuple[np.ndarray, float]:
        va = np.angle(v_ref).copy()
        vm = np.abs(v_ref).copy()
        va[self.pvpq] = x[:len(self.pvpq)]
        vm[self.pq] = x[len(self.pvpq):-1]
        return vm * np.exp(1j * va), float(x[-1])

    def embed(self, t: np.ndarray) -> np.ndarray:
        """Tangent in the full [angles, magnitudes, lambda] space"""
        full = np.zeros(2 * self.n + 1)
        full[self.pvpq] = t[:len(self.pvpq)]
        full[self.n + self.pq] = t[len(self.pvpq):-1]
        full[-1] = t[-1]
        return full

    def param_index(self, param: Optional[int]) -> int:
        """x index of a pinned quantity: None is lambda, an int is a bus position"""
        if param is None:
            return self.lam_index
        hits = np.flatnonzero(self.pq == param)
        return len(self.pvpq) + int(hits[0]) if hits.size else self.lam_index

    def param_of(self, k: int) -> Optional[int]:
        return None if k == self.lam_index else int(self.pq[k - len(self.pvpq)])


def augmented_jacobian(ybus: sp.spmatrix, v: np.ndarray, frame: _Frame,
                       ds: np.ndarray, k: int) -> sp.csr_matrix:
    jac = build_jacobian(ybus, v, frame.pv, frame.pq)
    f_lam = -np.r_[ds[frame.pvpq].real, ds[frame.pq].imag]
    pin = sp.csr_matrix(([1.0], ([0], [k])), shape=(1, frame.size))
    return sp.vstack([sp.hstack([jac, sp.csr_matrix(f_lam[:, None])]), pin], format="csr")


def _correct(ybus, sbus0, ds, frame: _Frame, x_pred, k, v_ref, tolerance, max_iterations):
    """Newton on the augmented system with x[k] pinned; (x, iterations, mismatch) or None"""
    x = x_pred.copy()
    target = x_pred[k]
    for iterations in range(1, max_iterations + 1):
        v, lam = frame.unpack(x, v_ref)
        if np.any(np.abs(v) <= 0) or not np.all(np.isfinite(v)):
            return None
        f = power_mismatch(ybus, v, sbus0 + lam * ds, frame.pv, frame.pq)
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        if norm <= tolerance:
            return x, iterations, norm
        dx = solve_linear(augmented_jacobian(ybus, v, frame, ds, k), -np.r_[f, x[k] - target])
        if dx is None:
            return None
        x = x + dx
    return None


def trace_pv_curve(case: GridCase, direction: LoadDirection,
                   opts: Optional[ContinuationOptions] = None,
                   y: Optional[AdmittanceMatrix] = None) -> PVCurve:
    """Trace the P-V curve from lambda = 0 through the nose"""
    opts = opts or ContinuationOptions()
    y = y or build_ybus(case)
    ybus = y.matrix
    ds = delta_sbus(case, direction)

    try:
        base = solve_newton(case, y, opts.solver)
    except PowerFlowError as e:
        raise BaseCaseInfeasible(f"base case does not solve: {e}") from e

    points = [CurvePoint(0.0, base)]
    v, lam, state = base.voltage, 0.0, dict(base.q_state)
    sigma = opts.initial_step
    easy_steps = 0
    param: Optional[int] = None
    prev_tangent: Optional[np.ndarray] = None
    passed_nose = False
    limit_nose = False

    while len(points) < opts.max_points:
        frame = _Frame(case, state)
        sbus0 = make_sbus(case, state)
        x = frame.pack(v, lam)

        k = frame.param_index(param)
        rhs = np.zeros(frame.size)
        rhs[-1] = 1.0
        t = solve_linear(augmented_jacobian(ybus, v, frame, ds, k), rhs)
        if t is None:
            # exactly singular at a turning point; re-pin lambda
            t = solve_linear(augmented_jacobian(ybus, v, frame, ds, frame.lam_index), rhs)
            if t is None:
                raise TraceStalled(lam, sigma)
        t = t / np.linalg.norm(t)
        if prev_tangent is not None and frame.embed(t) @ prev_tangent < 0:
            t = -t

        candidates = np.r_[np.arange(len(frame.pvpq), frame.size)]
        k = int(candidates[np.argmax(np.abs(t[candidates]))])

        x_pred = x + sigma * t / abs(t[k])
        result = _correct(ybus, sbus0, ds, frame, x_pred, k, v,
                          opts.solver.tolerance, opts.solver.max_iterations)

        limit_failure = False
        solution = None
        if result is not None:
            x_new, iterations, _ = result
            v_new, lam_new = frame.unpack(x_new, v)
            new_state = dict(state)
            events = ()
            loaded = apply_lambda(case, direction, lam_new)
            if opts.solver.enforce_q_limits and q_limit_changes(loaded, ybus, v_new, new_state):
                try:
                    resolved = solve_newton(loaded, y, opts.solver, v0=v_new, q_state=new_state)
                    v_new, new_state, events = resolved.voltage, dict(resolved.q_state), resolved.events
                    iterations += resolved.iterations
                except PowerFlowError:
                    limit_failure = True
            if not limit_failure:
                solution = make_solution(loaded, ybus, v_new, new_state, iterations, events)

        if solution is None:
            if limit_failure and sigma <= opts.nose_refine_step and not passed_nose:
                logger.info("Reactive limit leaves no solution past lambda=%.6f", lam)
                limit_nose = True
                break
            sigma /= 2
            easy_steps = 0
            if sigma < opts.min_step:
                if passed_nose:
                    break
                raise TraceStalled(lam, sigma)
            continue

        crossing = not passed_nose and lam_new < lam
        if crossing and sigma > opts.nose_refine_step:
            sigma = max(sigma / 2, opts.nose_refine_step)
            easy_steps = 0
            continue
        if crossing:
            passed_nose = True
            logger.debug("Nose bracketed at lambda=%.6f", lam)
            if not opts.trace_lower_branch:
                break

        points.append(CurvePoint(lam_new, solution))
        for event in events:
            logger.info("lambda=%.4f: bus %s reactive limit %s", lam_new, event.bus, event.action)

        prev_tangent = frame.embed(t)
        param = frame.param_of(k)
        v, lam, state = v_new, lam_new, new_state

        easy_steps = easy_steps + 1 if iterations <= EASY_CORRECTION else 0
        if easy_steps >= 2:
            sigma = min(sigma * 1.5, opts.initial_step)
            easy_steps = 0

        lam_max = max(p.lam for p in points)
        if passed_nose and lam < opts.lower_branch_fraction * lam_max:
            break
    else:
        if not passed_nose:
            raise NoseNotReached(lam, opts.max_points)

    lambdas = [p.lam for p in points]
    nose_index = int(np.argmax(lambdas))
    curve = PVCurve(points=points, nose_index=nose_index, direction=direction,
                    limit_induced_nose=limit_nose)
    logger.debug("Traced %s: %d points, lambda_max=%.6f", direction.describe(), len(points), curve.lambda_max)
    return curve


def nose_point(curve: PVCurve, bus: int) -> Tuple[float, float]:
    """(lambda_max, voltage magnitude at bus on the nose point)"""
    if not curve.points:
        raise ContinuationError("empty curve")
    nose = curve.points[curve.nose_index]
    return nose.lam, nose.solution.vm_at(bus)


def sweep_lambda_max(case: GridCase, direction: LoadDirection, step: float = 1e-3,
                     tolerance: float = 1e-6, opts: Optional[SolverOptions] = None,
                     y: Optional[AdmittanceMatrix] = None) -> float:
    """Brute-force loading limit: fixed lambda steps, then bisection at the first failure"""
    if not step > 0:
        raise ConfigError("sweep step must be positive")
    opts = opts or SolverOptions()
    y = y or build_ybus(case)
    try:
        sol = solve_newton(case, y, opts)
    except PowerFlowError as e:
        raise BaseCaseInfeasible(f"base case does not solve: {e}") from e

    def attempt(lam: float, start: PowerFlowSolution) -> Optional[PowerFlowSolution]:
        try:
            return solve_newton(apply_lambda(case, direction, lam), y, opts,
                                v0=start.voltage, q_state=start.q_state)
        except PowerFlowError:
            return None

    lam_ok = 0.0
    while True:
        trial = attempt(lam_ok + step, sol)
        if trial is None:
            break
        lam_ok, sol = lam_ok + step, trial
        if lam_ok > MAX_SWEEP_LAMBDA:
            raise ContinuationError(f"no loading limit below lambda={MAX_SWEEP_LAMBDA:g}")

    lo, hi = lam_ok, lam_ok + step
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        trial = attempt(mid, sol)
        if trial is None:
            hi = mid
        else:
            lo, sol = mid, trial
    return lo


def curve_to_frame(curve: PVCurve) -> pd.DataFrame:
    """Curve export table: lambda, bus_<id>_vm..., bus_<id>_va..."""
    bus_ids = curve.points[0].solution.bus_ids
    data = {"lambda": curve.lambdas}
    for j, bus_id in enumerate(bus_ids):
        data[f"bus_{bus_id}_vm"] = [p.solution.v_mag[j] for p in curve.points]
    for j, bus_id in enumerate(bus_ids):
        data[f"bus_{bus_id}_va"] = [p.solution.v_ang[j] for p in curve.points]
    return pd.DataFrame(data)
