"""Radial feeder model with a linearized DistFlow voltage solve.

Everything is per-unit. Buses and lines are immutable records; time-varying
quantities (loads, device setpoints) are swapped in with ``dataclasses.replace``
or :meth:`NetworkModel.with_state`.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

DEVICE_KINDS = ("generator", "storage", "load-bank")


class GridError(Exception):
    pass


class NonRadialTopology(GridError):
    pass


class MissingBus(GridError):
    pass


class UnknownBus(GridError, KeyError):
    pass


class DegenerateSensitivity(GridError):
    pass


@dataclass(frozen=True)
class DeviceRecord:
    id: str
    kind: str
    p_max: float
    q_max: float
    s_max: float
    p_set: float = 0.0
    q_set: float = 0.0
    p_avail: float | None = None

    def __post_init__(self):
        if self.kind not in DEVICE_KINDS:
            raise ValueError(f"unknown device kind {self.kind!r}")

    @property
    def p_bounds(self) -> tuple[float, float]:
        """Admissible active-power interval given the current availability."""
        if self.kind == "generator":
            avail = self.p_max if self.p_avail is None else self.p_avail
            return 0.0, max(0.0, min(self.p_max, avail))
        if self.kind == "storage":
            return -self.p_max, self.p_max
        return -self.p_max, 0.0

    def within_limits(self, p: float, q: float, tol: float = 1e-9) -> bool:
        lo, hi = self.p_bounds
        return (lo - tol <= p <= hi + tol and abs(q) <= self.q_max + tol
                and math.hypot(p, q) <= self.s_max + tol)


@dataclass(frozen=True)
class BusRecord:
    id: int
    v_min: float = 0.95
    v_max: float = 1.05
    load_p: float = 0.0
    load_q: float = 0.0
    devices: tuple[DeviceRecord, ...] = ()

    def __post_init__(self):
        if not 0 < self.v_min < self.v_max:
            raise ValueError(f"bus {self.id}: need 0 < v_min < v_max")


@dataclass(frozen=True)
class LineRecord:
    id: str
    from_bus: int
    to_bus: int
    r: float
    x: float
    i_cap: float = 10.0

    def __post_init__(self):
        if self.r < 0 or self.x < 0:
            raise ValueError(f"line {self.id}: negative impedance")
        if self.i_cap <= 0:
            raise ValueError(f"line {self.id}: i_cap must be positive")


@dataclass(frozen=True)
class OperatingPoint:
    inj_p: Mapping[int, float]
    inj_q: Mapping[int, float]

    @classmethod
    def from_network(cls, network: "NetworkModel") -> "OperatingPoint":
        inj_p, inj_q = {}, {}
        for bus in network.buses:
            inj_p[bus.id] = sum(d.p_set for d in bus.devices) - bus.load_p
            inj_q[bus.id] = sum(d.q_set for d in bus.devices) - bus.load_q
        return cls(inj_p, inj_q)

    def __add__(self, other: "OperatingPoint") -> "OperatingPoint":
        return OperatingPoint({b: v + other.inj_p[b] for b, v in self.inj_p.items()},
                              {b: v + other.inj_q[b] for b, v in self.inj_q.items()})


@dataclass(frozen=True)
class VoltageProfile:
    v: Mapping[int, float]
    step: int = 0

    def __getitem__(self, bus: int) -> float:
        return self.v[bus]


@dataclass(frozen=True)
class Violation:
    bus: int
    v: float
    deviation: float
    direction: str  # "under" | "over"


@dataclass(frozen=True, eq=False)
class NetworkModel:
    buses: tuple[BusRecord, ...]
    lines: tuple[LineRecord, ...]
    root_bus_id: int
    base_voltage: float = 1.0
    # derived topology, filled in __post_init__
    order: tuple[int, ...] = field(init=False, repr=False)
    parent_line: Mapping[int, LineRecord] = field(init=False, repr=False)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NonRadialTopology("duplicate bus ids")
        if self.root_bus_id not in ids:
            raise MissingBus(f"root bus {self.root_bus_id} not in network")
        known = set(ids)
        adj: dict[int, list[LineRecord]] = {b: [] for b in ids}
        for line in self.lines:
            for end in (line.from_bus, line.to_bus):
                if end not in known:
                    raise MissingBus(f"line {line.id} references unknown bus {end}")
            adj[line.from_bus].append(line)
            adj[line.to_bus].append(line)
        if len(self.lines) != len(ids) - 1:
            raise NonRadialTopology(
                f"{len(ids)} buses need {len(ids) - 1} lines, got {len(self.lines)}")
        parent: dict[int, LineRecord] = {}
        order = [self.root_bus_id]
        seen = {self.root_bus_id}
        queue = deque([self.root_bus_id])
        while queue:
            b = queue.popleft()
            for line in sorted(adj[b], key=lambda ln: ln.id):
                nxt = line.to_bus if line.from_bus == b else line.from_bus
                if nxt in seen:
                    if parent.get(b) is not line:
                        raise NonRadialTopology(f"cycle through line {line.id}")
                    continue
                seen.add(nxt)
                parent[nxt] = line
                order.append(nxt)
                queue.append(nxt)
        if len(seen) != len(ids):
            raise NonRadialTopology("network is not connected")
        object.__setattr__(self, "order", tuple(order))
        object.__setattr__(self, "parent_line", parent)

    # -- lookups -----------------------------------------------------------
    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus(self, bus_id: int) -> BusRecord:
        for b in self.buses:
            if b.id == bus_id:
                return b
        raise UnknownBus(bus_id)

    def line(self, line_id: str) -> LineRecord:
        for ln in self.lines:
            if ln.id == line_id:
                return ln
        raise KeyError(line_id)

    def parent_of(self, bus_id: int) -> int | None:
        line = self.parent_line.get(bus_id)
        if line is None:
            return None
        return line.from_bus if line.to_bus == bus_id else line.to_bus

    def path_lines(self, bus_id: int) -> list[LineRecord]:
        """Lines on the path from the root down to ``bus_id``."""
        out = []
        b = bus_id
        while b != self.root_bus_id:
            line = self.parent_line[b]
            out.append(line)
            b = self.parent_of(b)
        out.reverse()
        return out

    def device_bus(self, device_id: str) -> int:
        for b in self.buses:
            if any(d.id == device_id for d in b.devices):
                return b.id
        raise KeyError(device_id)

    def device(self, device_id: str) -> DeviceRecord:
        for b in self.buses:
            for d in b.devices:
                if d.id == device_id:
                    return d
        raise KeyError(device_id)

    def with_state(self, loads: Mapping[int, tuple[float, float]] | None = None,
                   devices: Mapping[str, DeviceRecord] | None = None) -> "NetworkModel":
        """Copy with some bus loads and/or device records replaced."""
        loads = loads or {}
        devices = devices or {}
        buses = []
        for b in self.buses:
            kw = {}
            if b.id in loads:
                kw["load_p"], kw["load_q"] = loads[b.id]
            if devices and any(d.id in devices for d in b.devices):
                kw["devices"] = tuple(devices.get(d.id, d) for d in b.devices)
            buses.append(replace(b, **kw) if kw else b)
        return NetworkModel(tuple(buses), self.lines, self.root_bus_id, self.base_voltage)


def _branch_flows(network: NetworkModel, op: OperatingPoint) -> dict[int, tuple[float, float]]:
    """Backward sweep: P/Q carried by each bus's parent line, keyed by receiving bus."""
    missing = set(network.bus_ids) - set(op.inj_p) | set(network.bus_ids) - set(op.inj_q)
    if missing:
        raise MissingBus(f"operating point lacks buses {sorted(missing)}")
    p = {b: -op.inj_p[b] for b in network.order}
    q = {b: -op.inj_q[b] for b in network.order}
    for b in reversed(network.order[1:]):
        up = network.parent_of(b)
        p[up] += p[b]
        q[up] += q[b]
    return {b: (p[b], q[b]) for b in network.order[1:]}


def solve_voltage(network: NetworkModel, op: OperatingPoint, step: int = 0) -> VoltageProfile:
    flows = _branch_flows(network, op)
    v = {network.root_bus_id: network.base_voltage}
    for b in network.order[1:]:
        line = network.parent_line[b]
        pf, qf = flows[b]
        v[b] = v[network.parent_of(b)] - (line.r * pf + line.x * qf) / network.base_voltage
    return VoltageProfile(v, step)


def branch_currents(network: NetworkModel, op: OperatingPoint,
                    profile: VoltageProfile) -> dict[str, float]:
    flows = _branch_flows(network, op)
    out = {}
    for b, (pf, qf) in flows.items():
        out[network.parent_line[b].id] = math.hypot(pf, qf) / profile.v[b]
    return out


@dataclass(frozen=True, eq=False)
class SensitivityMatrix:
    buses: tuple[int, ...]
    sp: np.ndarray
    sq: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "_index", {b: i for i, b in enumerate(self.buses)})

    def idx(self, bus: int) -> int:
        try:
            return self._index[bus]
        except KeyError:
            raise UnknownBus(bus) from None

    def p(self, i: int, j: int) -> float:
        return float(self.sp[self.idx(i), self.idx(j)])

    def q(self, i: int, j: int) -> float:
        return float(self.sq[self.idx(i), self.idx(j)])

    def to_dict(self) -> dict:
        return {"buses": list(self.buses),
                "sp": [[float(x) for x in row] for row in self.sp],
                "sq": [[float(x) for x in row] for row in self.sq]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SensitivityMatrix":
        return cls(tuple(int(b) for b in d["buses"]),
                   np.asarray(d["sp"], dtype=float), np.asarray(d["sq"], dtype=float))


def build_sensitivity(network: NetworkModel, profile: VoltageProfile | None = None,
                      reference: str = "base") -> SensitivityMatrix:
    """dV_i/dP_j and dV_i/dQ_j from impedance sums over the shared root path.

    ``reference="base"`` normalizes by the base voltage, which is the exact
    derivative of :func:`solve_voltage`. ``reference="profile"`` divides row i
    by the previous-step voltage of bus i instead.
    """
    ids = list(network.order)
    n = len(ids)
    # ancestor chains with cumulative impedance, root first
    chains: dict[int, list[tuple[int, float, float]]] = {}
    for b in ids:
        if b == network.root_bus_id:
            chains[b] = [(b, 0.0, 0.0)]
            continue
        up = network.parent_of(b)
        line = network.parent_line[b]
        _, r0, x0 = chains[up][-1]
        chains[b] = chains[up] + [(b, r0 + line.r, x0 + line.x)]
    sp = np.zeros((n, n))
    sq = np.zeros((n, n))
    for i, bi in enumerate(ids):
        ci = chains[bi]
        for j in range(i, n):
            cj = chains[ids[j]]
            k = 0
            while k < len(ci) and k < len(cj) and ci[k][0] == cj[k][0]:
                k += 1
            _, r, x = ci[k - 1]
            sp[i, j] = sp[j, i] = r
            sq[i, j] = sq[j, i] = x
    if reference == "profile":
        if profile is None:
            raise ValueError("profile reference needs a voltage profile")
        scale = np.array([profile.v[b] for b in ids])[:, None]
        sp, sq = sp / scale, sq / scale
    elif reference == "base":
        sp, sq = sp / network.base_voltage, sq / network.base_voltage
    else:
        raise ValueError(f"unknown reference {reference!r}")
    return SensitivityMatrix(tuple(ids), sp, sq)


def predict_voltage_change(sens: SensitivityMatrix, bus_j: int, dp: float,
                           dq: float) -> dict[int, float]:
    j = sens.idx(bus_j)
    dv = sens.sp[:, j] * dp + sens.sq[:, j] * dq
    return {b: float(dv[i]) for i, b in enumerate(sens.buses)}


def pzc_sensitivity(sens: SensitivityMatrix, pzc_bus: int, violated_bus: int,
                    actuator_bus: int) -> float:
    """Ratio of the PZC voltage response to the violated-bus response."""
    num = sens.p(pzc_bus, actuator_bus)
    den = sens.p(violated_bus, actuator_bus)
    if abs(den) < 1e-12:
        raise DegenerateSensitivity(
            f"bus {violated_bus} does not respond to actuation at {actuator_bus}")
    return num / den


def detect_violations(network: NetworkModel, profile: VoltageProfile,
                      buses: Iterable[int] | None = None) -> list[Violation]:
    wanted = None if buses is None else set(buses)
    out = []
    for b in network.buses:
        if wanted is not None and b.id not in wanted:
            continue
        v = profile.v[b.id]
        if v < b.v_min:
            out.append(Violation(b.id, v, b.v_min - v, "under"))
        elif v > b.v_max:
            out.append(Violation(b.id, v, v - b.v_max, "over"))
    return out
