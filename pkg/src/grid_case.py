#!/usr/bin/env python3
"""
Grid case model for the voltage stability toolkit.

Reads MATPOWER `.m` case files and the JSON interchange format, checks the
network invariants and builds the sparse bus admittance matrix. Powers are
kept in MW/MVAr, shunts and impedances in per-unit, angles in radians.
"""

import json
import logging
import os
import re
from collections import Counter
from dataclasses import MISSING, dataclass, asdict, fields
from enum import Enum
from functools import cached_property
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import requests
import scipy.sparse as sp

from src.errors import ConfigError, ParseError, UnknownBus, ValidationError

logger = logging.getLogger(__name__)

DATA_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data")
MATPOWER_CASE_URL = "https://raw.githubusercontent.com/MATPOWER/matpower/master/data/{name}.m"

# minimum MATPOWER columns read per matrix
BUS_COLUMNS = 13
GEN_COLUMNS = 10
BRANCH_COLUMNS = 11


class BusKind(Enum):
    PQ = "PQ"
    PV = "PV"
    SLACK = "Slack"

    @classmethod
    def from_matpower(cls, code: float) -> "BusKind":
        mapping = {1: cls.PQ, 2: cls.PV, 3: cls.SLACK}
        if int(code) == 4:
            raise ValidationError("isolated buses (type 4) are not supported")
        if int(code) not in mapping:
            raise ParseError(f"unknown bus type code {code}")
        return mapping[int(code)]


@dataclass(frozen=True)
class Bus:
    """One network node"""
    id: int
    kind: BusKind
    p_demand: float  # MW
    q_demand: float  # MVAr
    shunt_g: float  # pu at 1 pu voltage
    shunt_b: float
    v_mag_init: float
    v_ang_init: float  # rad
    base_kv: float = 0.0
    v_max: float = 1.1
    v_min: float = 0.9
    area: int = 1
    zone: int = 1


@dataclass(frozen=True)
class Gen:
    """Generator attached to a bus"""
    bus: int
    p_out: float  # MW
    q_out: float  # MVAr
    q_max: float
    q_min: float
    v_set: float
    status: bool = True
    m_base: float = 100.0
    p_max: float = 0.0
    p_min: float = 0.0


@dataclass(frozen=True)
class Branch:
    """Line or transformer between two buses"""
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    tap_ratio: float = 0.0  # 0 means no transformer
    phase_shift: float = 0.0  # rad
    status: bool = True
    rate_a: float = 0.0
    rate_b: float = 0.0
    rate_c: float = 0.0
    ang_min: float = -360.0  # degrees, carried for interchange only
    ang_max: float = 360.0


@dataclass(frozen=True)
class GridCase:
    """Static network model; validated on construction"""
    base_mva: float
    buses: Tuple[Bus, ...]
    gens: Tuple[Gen, ...]
    branches: Tuple[Branch, ...]
    name: str = "case"

    def __post_init__(self):
        validate_case(self)

    @cached_property
    def bus_ids(self) -> Tuple[int, ...]:
        return tuple(bus.id for bus in self.buses)

    @cached_property
    def bus_index(self) -> Dict[int, int]:
        return {bus_id: i for i, bus_id in enumerate(self.bus_ids)}

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def position(self, bus_id: int) -> int:
        try:
            return self.bus_index[bus_id]
        except KeyError:
            raise UnknownBus(bus_id) from None

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.position(bus_id)]

    def online_gens(self) -> List[Tuple[int, Gen]]:
        return [(i, gen) for i, gen in enumerate(self.gens) if gen.status]

    def index_sets(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Positions of the slack, PV and PQ buses.

        A PV bus without an in-service generator is solved as PQ.
        """
        regulated = {gen.bus for _, gen in self.online_gens()}
        ref, pv, pq = [], [], []
        for i, bus in enumerate(self.buses):
            if bus.kind is BusKind.SLACK:
                ref.append(i)
            elif bus.kind is BusKind.PV and bus.id in regulated:
                pv.append(i)
            else:
                if bus.kind is BusKind.PV:
                    logger.debug("bus %s has no online generator, solved as PQ", bus.id)
                pq.append(i)
        return np.array(ref, dtype=int), np.array(pv, dtype=int), np.array(pq, dtype=int)

    def load_buses(self) -> List[int]:
        """Bus ids carrying a nonzero demand"""
        return [bus.id for bus in self.buses if bus.p_demand != 0.0 or bus.q_demand != 0.0]


@dataclass(frozen=True, eq=False)
class AdmittanceMatrix:
    """Sparse complex bus admittance matrix in per-unit"""
    matrix: sp.csr_matrix
    bus_ids: Tuple[int, ...]

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def entry(self, from_id: int, to_id: int) -> complex:
        index = {bus_id: i for i, bus_id in enumerate(self.bus_ids)}
        return complex(self.matrix[index[from_id], index[to_id]])


def validate_case(case: GridCase) -> None:
    """Raise ValidationError when a network invariant does not hold"""
    if not case.buses:
        raise ValidationError("case has no buses")
    if not case.base_mva > 0:
        raise ValidationError(f"base_mva must be positive, got {case.base_mva}")

    ids = [bus.id for bus in case.buses]
    if len(set(ids)) != len(ids):
        duplicates = sorted(i for i, count in Counter(ids).items() if count > 1)
        raise ValidationError(f"duplicate bus ids: {duplicates}")

    slack = [bus.id for bus in case.buses if bus.kind is BusKind.SLACK]
    if len(slack) != 1:
        raise ValidationError(f"expected exactly one slack bus, found {len(slack)}")

    for bus in case.buses:
        if not bus.v_mag_init > 0:
            raise ValidationError(f"bus {bus.id} has non-positive initial voltage")

    known = set(ids)
    for gen in case.gens:
        if gen.bus not in known:
            raise ValidationError(f"generator references missing bus {gen.bus}")
        if gen.q_min > gen.q_max:
            raise ValidationError(f"generator at bus {gen.bus} has q_min > q_max")
        if not gen.v_set > 0:
            raise ValidationError(f"generator at bus {gen.bus} has non-positive v_set")

    for k, branch in enumerate(case.branches):
        for end in (branch.from_bus, branch.to_bus):
            if end not in known:
                raise ValidationError(f"branch {k} references missing bus {end}")
        if branch.status and branch.r == 0.0 and branch.x == 0.0:
            raise ValidationError(f"branch {k} ({branch.from_bus}-{branch.to_bus}) has zero impedance")


# MATPOWER .m subset

def _strip_comments(text: str) -> str:
    return re.sub(r"%[^\n]*", "", text)


def parse_matrix(body: str, section: str, min_columns: int) -> np.ndarray:
    """Parse the body of a `[ ... ]` matrix literal into a 2-D float array"""
    rows = []
    for raw in re.split(r"[;\n]", body):
        tokens = [tok for tok in re.split(r"[\s,]+", raw.strip()) if tok]
        if not tokens:
            continue
        try:
            rows.append([float(tok) for tok in tokens])
        except ValueError:
            raise ParseError(f"non-numeric entry in mpc.{section}: {raw.strip()!r}") from None

    if not rows:
        return np.zeros((0, min_columns))
    width = len(rows[0])
    if any(len(row) != width for row in rows):
        raise ParseError(f"ragged rows in mpc.{section}")
    if width < min_columns:
        raise ParseError(f"mpc.{section} has {width} columns, need at least {min_columns}")
    return np.array(rows, dtype=float)


def _matpower_section(text: str, section: str, min_columns: int) -> np.ndarray:
    match = re.search(rf"mpc\.{section}\s*=\s*\[(.*?)\]\s*;?", text, re.DOTALL)
    if not match:
        raise ParseError(f"missing mpc.{section} section")
    return parse_matrix(match.group(1), section, min_columns)


def _parse_matpower(text: str, name: str) -> GridCase:
    text = _strip_comments(text)

    base_match = re.search(r"mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;", text)
    if not base_match:
        raise ParseError("missing mpc.baseMVA")
    try:
        base_mva = float(base_match.group(1))
    except ValueError:
        raise ParseError(f"bad baseMVA literal {base_match.group(1)!r}") from None

    bus_rows = _matpower_section(text, "bus", BUS_COLUMNS)
    gen_rows = _matpower_section(text, "gen", GEN_COLUMNS)
    branch_rows = _matpower_section(text, "branch", BRANCH_COLUMNS)

    buses = tuple(
        Bus(
            id=int(row[0]),
            kind=BusKind.from_matpower(row[1]),
            p_demand=row[2],
            q_demand=row[3],
            shunt_g=row[4] / base_mva if base_mva else 0.0,
            shunt_b=row[5] / base_mva if base_mva else 0.0,
            v_mag_init=row[7],
            v_ang_init=float(np.deg2rad(row[8])),
            base_kv=row[9],
            v_max=row[11],
            v_min=row[12],
            area=int(row[6]),
            zone=int(row[10]),
        )
        for row in bus_rows
    )
    gens = tuple(
        Gen(
            bus=int(row[0]),
            p_out=row[1],
            q_out=row[2],
            q_max=row[3],
            q_min=row[4],
            v_set=row[5],
            m_base=row[6],
            status=bool(row[7] > 0),
            p_max=row[8],
            p_min=row[9],
        )
        for row in gen_rows
    )
    branches = tuple(
        Branch(
            from_bus=int(row[0]),
            to_bus=int(row[1]),
            r=row[2],
            x=row[3],
            b_charging=row[4],
            rate_a=row[5],
            rate_b=row[6],
            rate_c=row[7],
            tap_ratio=row[8],
            phase_shift=float(np.deg2rad(row[9])),
            status=bool(row[10] > 0),
            ang_min=row[11] if len(row) > 11 else -360.0,
            ang_max=row[12] if len(row) > 12 else 360.0,
        )
        for row in branch_rows
    )
    return GridCase(base_mva=base_mva, buses=buses, gens=gens, branches=branches, name=name)


# JSON interchange

def _record(cls, data: Dict[str, Any], renames: Optional[Dict[str, str]] = None):
    renames = renames or {}
    kwargs = {}
    for f in fields(cls):
        key = renames.get(f.name, f.name)
        if key in data:
            kwargs[f.name] = data[key]
        elif f.default is MISSING:
            raise ParseError(f"{cls.__name__} record is missing '{key}'")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad {cls.__name__} record: {e}") from None


BRANCH_JSON_KEYS = {"from_bus": "from", "to_bus": "to"}


def _parse_json(text: str, name: str) -> GridCase:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON case: {e}") from None
    if not isinstance(data, dict):
        raise ParseError("JSON case must be an object")
    for key in ("base_mva", "buses", "gens", "branches"):
        if key not in data:
            raise ParseError(f"JSON case is missing '{key}'")

    buses = []
    for item in data["buses"]:
        item = dict(item)
        try:
            item["kind"] = BusKind(item.get("kind"))
        except ValueError:
            raise ParseError(f"unknown bus kind {item.get('kind')!r}") from None
        buses.append(_record(Bus, item))
    gens = [_record(Gen, item) for item in data["gens"]]
    branches = [_record(Branch, item, BRANCH_JSON_KEYS) for item in data["branches"]]

    return GridCase(
        base_mva=float(data["base_mva"]),
        buses=tuple(buses),
        gens=tuple(gens),
        branches=tuple(branches),
        name=data.get("name", name),
    )


def parse_case(text: str, format: str = "matpower-m", name: str = "case") -> GridCase:
    """Parse case-file content in the declared format"""
    if format == "matpower-m":
        return _parse_matpower(text, name)
    if format == "json":
        return _parse_json(text, name)
    raise ConfigError(f"unknown case format {format!r} (expected 'matpower-m' or 'json')")


def case_to_dict(case: GridCase) -> Dict[str, Any]:
    buses = []
    for bus in case.buses:
        record = asdict(bus)
        record["kind"] = bus.kind.value
        buses.append(record)
    branches = []
    for branch in case.branches:
        record = asdict(branch)
        for field_name, key in BRANCH_JSON_KEYS.items():
            record[key] = record.pop(field_name)
        branches.append(record)
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": buses,
        "gens": [asdict(gen) for gen in case.gens],
        "branches": branches,
    }


def serialize_case(case: GridCase) -> str:
    return json.dumps(case_to_dict(case), indent=2)


def fetch_case(name: str, data_dir: str = DATA_DIR, session: Optional[requests.Session] = None) -> str:
    """Path of a MATPOWER case file, downloading it into data_dir once"""
    if not re.fullmatch(r"[A-Za-z0-9_]+", name):
        raise ConfigError(f"invalid case name {name!r}")

    path = os.path.join(data_dir, f"{name}.m")
    if os.path.exists(path):
        return path

    session = session or requests.Session()
    session.headers.update({"User-Agent": "voltage-stability-toolkit/1.0"})
    url = MATPOWER_CASE_URL.format(name=name)
    logger.info("Fetching %s from %s", name, url)
    try:
        response = session.get(url, timeout=30)
        response.raise_for_status()
    except requests.RequestException as e:
        raise ConfigError(f"could not fetch case {name}: {e}") from None

    os.makedirs(data_dir, exist_ok=True)
    with open(path, "w") as f:
        f.write(response.text)
    logger.info("Cached %s at %s", name, path)
    return path


def load_case(path_or_name: str, data_dir: str = DATA_DIR) -> GridCase:
    """Load a case from a `.m`/`.json` path, or by MATPOWER case name"""
    if os.path.exists(path_or_name):
        path = path_or_name
    else:
        stem, ext = os.path.splitext(os.path.basename(path_or_name))
        if ext:
            raise ConfigError(f"case file not found: {path_or_name}")
        path = fetch_case(stem, data_dir)

    ext = os.path.splitext(path)[1].lower()
    formats = {".m": "matpower-m", ".json": "json"}
    if ext not in formats:
        raise ConfigError(f"unsupported case file extension {ext!r}")

    with open(path, "r") as f:
        text = f.read()
    name = os.path.splitext(os.path.basename(path))[0]
    case = parse_case(text, formats[ext], name=name)
    logger.debug("Loaded %s: %d buses, %d gens, %d branches",
                 name, case.n_bus, len(case.gens), len(case.branches))
    return case


def case_summary(case: GridCase) -> Dict[str, Any]:
    kinds = [bus.kind for bus in case.buses]
    return {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": case.n_bus,
        "pq_buses": kinds.count(BusKind.PQ),
        "pv_buses": kinds.count(BusKind.PV),
        "slack_bus": next(bus.id for bus in case.buses if bus.kind is BusKind.SLACK),
        "generators_online": len(case.online_gens()),
        "branches_in_service": sum(1 for br in case.branches if br.status),
        "transformers": sum(1 for br in case.branches if br.tap_ratio not in (0.0, 1.0) or br.phase_shift),
        "total_p_demand_mw": float(sum(bus.p_demand for bus in case.buses)),
        "total_q_demand_mvar": float(sum(bus.q_demand for bus in case.buses)),
    }


def build_ybus(case: GridCase) -> AdmittanceMatrix:
    """Bus admittance matrix with tap, phase shift, line charging and bus shunts"""
    n = case.n_bus
    live = [br for br in case.branches if br.status]

    f = np.array([case.bus_index[br.from_bus] for br in live], dtype=int)
    t = np.array([case.bus_index[br.to_bus] for br in live], dtype=int)
    r = np.array([br.r for br in live], dtype=float)
    x = np.array([br.x for br in live], dtype=float)
    b = np.array([br.b_charging for br in live], dtype=float)
    ratio = np.array([br.tap_ratio for br in live], dtype=float)
    shift = np.array([br.phase_shift for br in live], dtype=float)

    ys = 1.0 / (r + 1j * x)
    tap = np.where(ratio == 0.0, 1.0, ratio) * np.exp(1j * shift)

    ytt = ys + 1j * b / 2
    yff = ytt / (tap * np.conj(tap))
    yft = -ys / np.conj(tap)
    ytf = -ys / tap

    rows = np.concatenate([f, f, t, t])
    cols = np.concatenate([f, t, f, t])
    data = np.concatenate([yff, yft, ytf, ytt])

    shunts = np.array([bus.shunt_g + 1j * bus.shunt_b for bus in case.buses], dtype=complex)
    ybus = sp.coo_matrix((data, (rows, cols)), shape=(n, n), dtype=complex) + sp.diags(shunts)
    return AdmittanceMatrix(matrix=sp.csr_matrix(ybus), bus_ids=case.bus_ids)
