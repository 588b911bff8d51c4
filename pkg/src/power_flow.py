#!/usr/bin/env python3
"""
Newton-Raphson AC power flow in polar coordinates with generator
reactive-limit enforcement (PV -> PQ switching in an outer loop).
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import MatrixRankWarning, spsolve

from src.errors import ConfigError, NotConverged, NumericalError, UnknownBus
from src.grid_case import AdmittanceMatrix, GridCase, build_ybus

logger = logging.getLogger(__name__)

# MVAr slack allowed before a generator counts as outside its reactive range
Q_LIMIT_TOL = 1e-4
DIVERGENCE_MISMATCH = 1e10


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iterations: int = 30
    enforce_q_limits: bool = True
    flat_start: bool = False
    max_switch_rounds: int = 10

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ConfigError("solver tolerance must be positive")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be at least 1")


@dataclass(frozen=True)
class QLimitEvent:
    """A PV bus pinned at a reactive limit, or released back to PV"""
    bus: int
    action: str  # "max", "min" or "released"
    q_mvar: float


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    bus_ids: Tuple[int, ...]
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    q_state: Dict[int, str] = field(default_factory=dict)
    events: Tuple[QLimitEvent, ...] = ()

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    def _position(self, bus_id: int) -> int:
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise UnknownBus(bus_id) from None

    def vm_at(self, bus_id: int) -> float:
        return float(self.v_mag[self._position(bus_id)])

    def va_at(self, bus_id: int) -> float:
        return float(self.v_ang[self._position(bus_id)])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bus": self.bus_ids,
            "vm": self.v_mag,
            "va": self.v_ang,
            "p_inj": self.p_inj,
            "q_inj": self.q_inj,
        })


def power_mismatch(ybus: sp.spmatrix, v: np.ndarray, sbus: np.ndarray,
                   pv: np.ndarray, pq: np.ndarray) -> np.ndarray:
    """Stacked [dP at PV+PQ buses, dQ at PQ buses] in per-unit"""
    mis = v * np.conj(ybus @ v) - sbus
    pvpq = np.r_[pv, pq]
    return np.r_[mis[pvpq].real, mis[pq].imag]


def dsbus_dv(ybus: sp.spmatrix, v: np.ndarray) -> Tuple[sp.spmatrix, sp.spmatrix]:
    """Partial derivatives of complex bus injections w.r.t. |V| and angle"""
    ibus = ybus @ v
    diag_v = sp.diags(v)
    diag_i = sp.diags(ibus)
    diag_vnorm = sp.diags(v / np.abs(v))

    ds_dvm = diag_v @ (ybus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - ybus @ diag_v).conj()
    return ds_dvm, ds_dva


def build_jacobian(ybus: sp.spmatrix, v: np.ndarray, pv: np.ndarray, pq: np.ndarray) -> sp.csr_matrix:
    """Jacobian of power_mismatch w.r.t. [angles at PV+PQ, magnitudes at PQ]"""
    ds_dvm, ds_dva = dsbus_dv(ybus, v)
    pvpq = np.r_[pv, pq]
    ds_dvm = sp.csr_matrix(ds_dvm)
    ds_dva = sp.csr_matrix(ds_dva)

    j11 = ds_dva[pvpq, :][:, pvpq].real
    j12 = ds_dvm[pvpq, :][:, pq].real
    j21 = ds_dva[pq, :][:, pvpq].imag
    j22 = ds_dvm[pq, :][:, pq].imag

    return sp.vstack([
        sp.hstack([j11, j12]),
        sp.hstack([j21, j22]),
    ], format="csr")


def solve_linear(jac: sp.spmatrix, rhs: np.ndarray) -> Optional[np.ndarray]:
    """Sparse solve; None when the matrix is singular"""
    with warnings.catch_warnings():
        warnings.simplefilter("error", MatrixRankWarning)
        try:
            dx = spsolve(sp.csc_matrix(jac), rhs)
        except (MatrixRankWarning, RuntimeError):
            return None
    dx = np.atleast_1d(dx)
    if not np.all(np.isfinite(dx)):
        return None
    return dx


def make_sbus(case: GridCase, q_state: Dict[int, str]) -> np.ndarray:
    """Scheduled complex injections in per-unit.

    Buses held at a reactive limit inject the summed limit of their online
    generators instead of the dispatched q_out.
    """
    p = np.array([-bus.p_demand for bus in case.buses], dtype=float)
    q = np.array([-bus.q_demand for bus in case.buses], dtype=float)
    for _, gen in case.online_gens():
        i = case.bus_index[gen.bus]
        p[i] += gen.p_out
        pinned = q_state.get(gen.bus)
        if pinned == "max":
            q[i] += gen.q_max
        elif pinned == "min":
            q[i] += gen.q_min
        else:
            q[i] += gen.q_out
    return (p + 1j * q) / case.base_mva


def initial_voltage(case: GridCase, opts: SolverOptions, q_state: Dict[int, str],
                    v0: Optional[np.ndarray] = None) -> np.ndarray:
    if v0 is not None:
        v = np.array(v0, dtype=complex)
    elif opts.flat_start:
        v = np.ones(case.n_bus, dtype=complex)
    else:
        vm = np.array([bus.v_mag_init for bus in case.buses])
        va = np.array([bus.v_ang_init for bus in case.buses])
        v = vm * np.exp(1j * va)

    ref, pv, _ = case.index_sets()
    regulated = set(np.r_[ref, pv].tolist())
    for _, gen in case.online_gens():
        i = case.bus_index[gen.bus]
        if i in regulated and gen.bus not in q_state:
            v[i] = gen.v_set * v[i] / abs(v[i]) if abs(v[i]) > 0 else gen.v_set
    return v


def effective_sets(case: GridCase, q_state: Dict[int, str]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    ref, pv, pq = case.index_sets()
    pinned = {case.bus_index[bus_id] for bus_id in q_state}
    keep = np.array([i for i in pv if i not in pinned], dtype=int)
    moved = np.array([i for i in pv if i in pinned], dtype=int)
    return ref, keep, np.sort(np.r_[pq, moved]).astype(int)


def newton_iterate(ybus: sp.spmatrix, sbus: np.ndarray, v0: np.ndarray,
                   pv: np.ndarray, pq: np.ndarray,
                   tolerance: float, max_iterations: int) -> Tuple[np.ndarray, int, float, Optional[str]]:
    """Full Newton on the polar mismatch equations.

    Returns (V, iterations, max_mismatch, failure_reason). Iterations count
    evaluated operating points, the starting point included.
    """
    v = v0.copy()
    vm = np.abs(v)
    va = np.angle(v)
    pvpq = np.r_[pv, pq]
    npvpq = len(pvpq)

    f = power_mismatch(ybus, v, sbus, pv, pq)
    norm = float(np.max(np.abs(f))) if f.size else 0.0
    iterations = 1

    while norm > tolerance:
        if iterations > max_iterations:
            return v, iterations, norm, "max_iterations"

        dx = solve_linear(build_jacobian(ybus, v, pv, pq), -f)
        if dx is None:
            return v, iterations, norm, "singular_jacobian"

        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        v = vm * np.exp(1j * va)
        iterations += 1

        f = power_mismatch(ybus, v, sbus, pv, pq)
        norm = float(np.max(np.abs(f)))
        if not np.isfinite(norm) or norm > DIVERGENCE_MISMATCH or np.any(vm <= 0):
            return v, iterations, norm, "diverged"

    return v, iterations, norm, None


def bus_reactive_output(case: GridCase, q_inj: np.ndarray) -> Dict[int, float]:
    """Total generator MVAr per regulated bus implied by the solution"""
    out = {}
    for _, gen in case.online_gens():
        i = case.bus_index[gen.bus]
        out[gen.bus] = q_inj[i] * case.base_mva + case.buses[i].q_demand
    return out


def reactive_range(case: GridCase, bus_id: int) -> Tuple[float, float]:
    gens = [gen for _, gen in case.online_gens() if gen.bus == bus_id]
    return sum(g.q_min for g in gens), sum(g.q_max for g in gens)


def _v_set(case: GridCase, bus_id: int) -> float:
    return next(gen.v_set for _, gen in case.online_gens() if gen.bus == bus_id)


def q_limit_changes(case: GridCase, ybus: sp.spmatrix, v: np.ndarray,
                    q_state: Dict[int, str]) -> List[QLimitEvent]:
    """PV buses outside their reactive range, else pinned buses able to regulate again"""
    _, pv, _ = effective_sets(case, q_state)
    q_bus = bus_reactive_output(case, (v * np.conj(ybus @ v)).imag)

    changes = []
    for i in pv:
        bus_id = case.buses[i].id
        q_lo, q_hi = reactive_range(case, bus_id)
        if q_bus[bus_id] > q_hi + Q_LIMIT_TOL:
            changes.append(QLimitEvent(bus_id, "max", q_hi))
        elif q_bus[bus_id] < q_lo - Q_LIMIT_TOL:
            changes.append(QLimitEvent(bus_id, "min", q_lo))
    if changes:
        return changes

    vm = np.abs(v)
    for bus_id, side in q_state.items():
        i = case.bus_index[bus_id]
        v_set = _v_set(case, bus_id)
        if (side == "max" and vm[i] > v_set) or (side == "min" and vm[i] < v_set):
            changes.append(QLimitEvent(bus_id, "released", q_bus[bus_id]))
    return changes


def apply_q_changes(case: GridCase, v: np.ndarray, q_state: Dict[int, str],
                    changes: List[QLimitEvent]) -> None:
    """Update q_state in place; released buses get their set-point back in v"""
    for event in changes:
        logger.debug("Q-limit: bus %s -> %s (%.3f MVAr)", event.bus, event.action, event.q_mvar)
        if event.action == "released":
            del q_state[event.bus]
            i = case.bus_index[event.bus]
            v[i] = _v_set(case, event.bus) * v[i] / abs(v[i])
        else:
            q_state[event.bus] = event.action


def make_solution(case: GridCase, ybus: sp.spmatrix, v: np.ndarray, q_state: Dict[int, str],
                  iterations: int, events: Tuple[QLimitEvent, ...] = (),
                  sbus: Optional[np.ndarray] = None) -> PowerFlowSolution:
    """Package a converged voltage vector; max_mismatch is recomputed from v"""
    s_inj = v * np.conj(ybus @ v)
    _, pv, pq = effective_sets(case, q_state)
    sbus = make_sbus(case, q_state) if sbus is None else sbus
    final = power_mismatch(ybus, v, sbus, pv, pq)
    return PowerFlowSolution(
        bus_ids=case.bus_ids,
        v_mag=np.abs(v),
        v_ang=np.angle(v),
        p_inj=s_inj.real,
        q_inj=s_inj.imag,
        converged=True,
        iterations=iterations,
        max_mismatch=float(np.max(np.abs(final))) if final.size else 0.0,
        q_state=dict(q_state),
        events=tuple(events),
    )


def solve_newton(case: GridCase, y: Optional[AdmittanceMatrix] = None,
                 opts: Optional[SolverOptions] = None,
                 v0: Optional[np.ndarray] = None,
                 q_state: Optional[Dict[int, str]] = None) -> PowerFlowSolution:
    """Solve the AC power flow.

    v0 warm-starts the voltages; q_state carries buses already held at a
    reactive limit ({bus_id: "max" | "min"}) from a previous solve.
    """
    opts = opts or SolverOptions()
    y = y or build_ybus(case)
    ybus = y.matrix
    state = dict(q_state or {})
    events: List[QLimitEvent] = []
    total_iterations = 0

    v = initial_voltage(case, opts, state, v0)
    for round_number in range(opts.max_switch_rounds + 1):
        _, pv, pq = effective_sets(case, state)
        sbus = make_sbus(case, state)
        if not (np.all(np.isfinite(sbus)) and np.all(np.isfinite(v))):
            raise NumericalError("non-finite injections or starting voltages")

        v, iterations, norm, reason = newton_iterate(
            ybus, sbus, v, pv, pq, opts.tolerance, opts.max_iterations)
        total_iterations += iterations
        if reason:
            raise NotConverged(reason, total_iterations, norm)

        if not opts.enforce_q_limits:
            break
        changes = q_limit_changes(case, ybus, v, state)
        if not changes:
            break
        if round_number == opts.max_switch_rounds:
            raise NotConverged("q_limit_switching", total_iterations, norm)
        apply_q_changes(case, v, state, changes)
        events.extend(changes)

    return make_solution(case, ybus, v, state, total_iterations, tuple(events))


def generator_dispatch(case: GridCase, solution: PowerFlowSolution) -> pd.DataFrame:
    """Per-generator P/Q implied by a solution.

    Slack active power goes to the first online generator at the slack bus;
    bus reactive output is shared in proportion to each unit's range.
    """
    slack = {case.buses[i].id for i in case.index_sets()[0]}
    q_bus = bus_reactive_output(case, solution.q_inj)
    rows = []
    seen_slack_p = set()
    by_bus: Dict[int, List[Tuple[int, object]]] = {}
    for k, gen in case.online_gens():
        by_bus.setdefault(gen.bus, []).append((k, gen))

    for bus_id, units in by_bus.items():
        i = case.bus_index[bus_id]
        q_total = q_bus[bus_id]
        q_lo = sum(g.q_min for _, g in units)
        ranges = np.array([g.q_max - g.q_min for _, g in units])
        if ranges.sum() > 0:
            shares = [g.q_min + (q_total - q_lo) * r / ranges.sum() for (_, g), r in zip(units, ranges)]
        else:
            shares = [q_total / len(units)] * len(units)

        for (k, gen), q in zip(units, shares):
            p = gen.p_out
            if bus_id in slack and bus_id not in seen_slack_p:
                others = sum(g.p_out for kk, g in units if kk != k)
                p = solution.p_inj[i] * case.base_mva + case.buses[i].p_demand - others
                seen_slack_p.add(bus_id)
            rows.append({
                "gen": k,
                "bus": bus_id,
                "p_mw": float(p),
                "q_mvar": float(q),
                "q_min": gen.q_min,
                "q_max": gen.q_max,
                "slack": bus_id in slack,
                "at_limit": solution.q_state.get(bus_id, ""),
            })
    return pd.DataFrame(rows).sort_values("gen").reset_index(drop=True)
