"""Zonal agents: off-chain monitoring, bid pricing and DG actuation.

Each zone has one dispatchable device. Pricing follows the agent revenue
model: reactive power is sold at ``pr_q`` per p.u.-hour, and any active-power
curtailment is charged as lost wholesale revenue marked up by ``alpha``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping

from voltchain.contract import quantize_dv
from voltchain.grid import (
    DegenerateSensitivity,
    DeviceRecord,
    NetworkModel,
    OperatingPoint,
    SensitivityMatrix,
    Violation,
    VoltageProfile,
    branch_currents,
    pzc_sensitivity,
    solve_voltage,
)
from voltchain.ledger import KeyPair

INF = float("inf")


@dataclass(frozen=True)
class ViolationReport:
    bus: int
    direction: str
    deviation: float
    step: int


@dataclass(frozen=True)
class BidComputation:
    feasible: bool
    dp: float = 0.0
    dq: float = 0.0
    cost: float = 0.0
    price: float = 0.0
    local_cost: float | None = None

    @classmethod
    def infeasible(cls) -> "BidComputation":
        return cls(False, cost=INF, price=INF)


@dataclass(frozen=True)
class SubcontractPlan:
    neighbor: int
    pzc_bus: int
    dv_target: float
    reserve_price: float
    own: BidComputation
    standalone: BidComputation


@dataclass
class ZonalAgent:
    agent_id: int
    zone_buses: frozenset[int]
    zone_lines: frozenset[str]
    pzc_buses: dict[int, int]  # neighbour agent -> shared bus
    device_id: str
    device_bus: int
    pr_q: float
    alpha: float
    owned_buses: frozenset[int] = frozenset()
    meter_buses: frozenset[int] = frozenset()
    keys: KeyPair | None = None
    bid_markup: float = 0.0  # price = cost * (1 + markup); negative means a discount
    subcontract_above: float | None = None
    local_mitigation: bool = True
    target_margin: float = 0.0
    # off-chain runtime state
    nonce: int = 0
    bids: dict[int, BidComputation] = field(default_factory=dict)
    replied: set[int] = field(default_factory=set)
    subcontracts: dict[int, SubcontractPlan] = field(default_factory=dict)

    def __post_init__(self):
        if not self.meter_buses:
            self.meter_buses = self.zone_buses
        if not self.owned_buses:
            self.owned_buses = self.zone_buses

    def next_nonce(self) -> int:
        self.nonce += 1
        return self.nonce


# -- dispatch ------------------------------------------------------------------

def _interval_on_line(a: float, b: float, dv: float, dev: DeviceRecord) -> tuple[float, float] | None:
    """Feasible range of dp along a*dp + b*dq = dv (b > 0) inside box and circle."""
    p0, q0 = dev.p_set, dev.q_set
    plo, phi = dev.p_bounds
    lo, hi = plo - p0, phi - p0
    c = q0 + dv / b  # q as a function of dp is c - k*dp
    k = a / b
    if k > 0:
        lo = max(lo, (c - dev.q_max) / k)
        hi = min(hi, (c + dev.q_max) / k)
    elif abs(c) > dev.q_max + 1e-12:
        return None
    qa = 1.0 + k * k
    qb = 2.0 * (p0 - c * k)
    qc = p0 * p0 + c * c - dev.s_max * dev.s_max
    disc = qb * qb - 4.0 * qa * qc
    if disc < 0:
        return None
    root = math.sqrt(disc)
    lo = max(lo, (-qb - root) / (2 * qa))
    hi = min(hi, (-qb + root) / (2 * qa))
    if lo > hi + 1e-12:
        return None
    return lo, max(lo, hi)


def dispatch_cost(dp: float, dq: float, pr_q: float, pr_p: float, alpha: float, dt: float) -> float:
    return pr_q * abs(dq) * dt + alpha * pr_p * max(-dp, 0.0) * dt


def dispatch(sp: float, sq: float, dv: float, dev: DeviceRecord, pr_q: float, pr_p: float,
             alpha: float, dt: float) -> BidComputation:
    """Cheapest (dp, dq) moving the observed bus by exactly ``dv``.

    The feasible set is a segment of the line sp*dp + sq*dq = dv clipped by
    the capability box and circle; cost is convex piecewise linear along it,
    so the optimum sits at a segment end or a kink (dp = 0 or dq = 0).
    """
    if dv == 0:
        return BidComputation(True)
    if sq > 1e-15:
        seg = _interval_on_line(sp, sq, dv, dev)
        if seg is None:
            return BidComputation.infeasible()
        lo, hi = seg
        cands = [lo, hi, min(max(0.0, lo), hi)]
        if sp > 0:
            cands.append(min(max(dv / sp, lo), hi))
        best = None
        for dp in cands:
            dq = (dv - sp * dp) / sq
            cost = dispatch_cost(dp, dq, pr_q, pr_p, alpha, dt)
            key = (round(cost, 9), abs(dp), abs(dq))
            if best is None or key < best[0]:
                best = (key, dp, dq, cost)
        _, dp, dq, cost = best
        return BidComputation(True, dp, dq, cost, cost)
    if sp > 1e-15:
        dp = dv / sp
        p = dev.p_set + dp
        plo, phi = dev.p_bounds
        if not plo - 1e-12 <= p <= phi + 1e-12 or abs(p) > dev.s_max:
            return BidComputation.infeasible()
        room = math.sqrt(max(dev.s_max ** 2 - p * p, 0.0))
        qlo = max(-dev.q_max, -room) - dev.q_set
        qhi = min(dev.q_max, room) - dev.q_set
        if qlo > qhi + 1e-12:
            return BidComputation.infeasible()
        dq = min(max(0.0, qlo), qhi)
        cost = dispatch_cost(dp, dq, pr_q, pr_p, alpha, dt)
        return BidComputation(True, dp, dq, cost, cost)
    return BidComputation.infeasible()


# -- stage I: monitoring ---------------------------------------------------------

def read_zone_state(agent: ZonalAgent, network: NetworkModel, profile: VoltageProfile,
                    step: int) -> tuple[dict[int, float], list[dict]]:
    """Zone voltages (meters read the model exactly) and meter payloads for the ledger."""
    zone_v = {b: profile.v[b] for b in sorted(agent.meter_buses)}
    payloads = [
        {"type": "MeterReading", "bus": bus, "v": profile.v[bus], "p": 0.0, "q": 0.0,
         "step": step, "device": None}
        for bus in sorted(set(agent.pzc_buses.values()))
    ]
    dev = network.device(agent.device_id)
    payloads.append({"type": "MeterReading", "bus": agent.device_bus,
                     "v": profile.v[agent.device_bus], "p": dev.p_set, "q": dev.q_set,
                     "step": step, "device": agent.device_id})
    return zone_v, payloads


def zone_violations(agent: ZonalAgent, network: NetworkModel, zone_v: Mapping[int, float],
                    step: int) -> list[ViolationReport]:
    out = []
    for bus in sorted(agent.owned_buses):
        rec = network.bus(bus)
        v = zone_v[bus]
        if v < rec.v_min:
            out.append(ViolationReport(bus, "under", rec.v_min - v, step))
        elif v > rec.v_max:
            out.append(ViolationReport(bus, "over", v - rec.v_max, step))
    return out


def worst_violation(reports: list[ViolationReport]) -> ViolationReport | None:
    if not reports:
        return None
    return max(reports, key=lambda r: (r.deviation, -r.bus))


def compute_pzc_targets(agent: ZonalAgent, violation: ViolationReport | Violation,
                        sens: SensitivityMatrix, neighbor_device_bus: Mapping[int, int],
                        resolution: float = 1e-4) -> dict[int, tuple[int, float]]:
    """Voltage change each neighbour must produce at its PZC to clear ``violation``."""
    sign = 1.0 if violation.direction == "under" else -1.0
    need = violation.deviation + agent.target_margin
    out = {}
    for neighbor in sorted(agent.pzc_buses):
        pzc = agent.pzc_buses[neighbor]
        try:
            ratio = pzc_sensitivity(sens, pzc, violation.bus, neighbor_device_bus[neighbor])
        except DegenerateSensitivity:
            continue
        if ratio <= 0:
            continue
        out[neighbor] = (pzc, sign * quantize_dv(need * ratio, resolution))
    return out


# -- stage II: pricing -----------------------------------------------------------

def _apply(network: NetworkModel, device_id: str, dp: float, dq: float) -> NetworkModel:
    dev = network.device(device_id)
    return network.with_state(devices={device_id: replace(dev, p_set=dev.p_set + dp,
                                                           q_set=dev.q_set + dq)})


def zone_limits_hold(agent: ZonalAgent, before: NetworkModel, after: NetworkModel) -> bool:
    """Zone buses in band (or no worse than before) and zone lines within capacity."""
    v0 = solve_voltage(before, OperatingPoint.from_network(before))
    op1 = OperatingPoint.from_network(after)
    v1 = solve_voltage(after, op1)
    for bus in agent.zone_buses:
        rec = after.bus(bus)
        dev1 = max(rec.v_min - v1.v[bus], v1.v[bus] - rec.v_max, 0.0)
        if dev1 > 0:
            dev0 = max(rec.v_min - v0.v[bus], v0.v[bus] - rec.v_max, 0.0)
            if dev0 == 0 or dev1 > dev0 + 1e-12:
                return False
    currents = branch_currents(after, op1, v1)
    return all(currents[ln] <= after.line(ln).i_cap + 1e-12 for ln in agent.zone_lines)


def quote(agent: ZonalAgent, cost: float) -> float:
    return cost * (1.0 + agent.bid_markup)


def evaluate_cfp(agent: ZonalAgent, pzc_bus: int, dv_target: float, sens: SensitivityMatrix,
                 network: NetworkModel, pr_p: float, dt: float,
                 check_zone: bool = True) -> BidComputation:
    dev = network.device(agent.device_id)
    comp = dispatch(sens.p(pzc_bus, agent.device_bus), sens.q(pzc_bus, agent.device_bus),
                    dv_target, dev, agent.pr_q, pr_p, agent.alpha, dt)
    if not comp.feasible:
        return comp
    if check_zone and not zone_limits_hold(agent, network,
                                           _apply(network, agent.device_id, comp.dp, comp.dq)):
        return BidComputation.infeasible()
    return replace(comp, price=quote(agent, comp.cost))


def local_mitigation(agent: ZonalAgent, violation: ViolationReport, sens: SensitivityMatrix,
                     network: NetworkModel, pr_p: float, dt: float,
                     resolution: float = 1e-4) -> BidComputation:
    """Cost of clearing the violation with the agent's own DG (lost revenue, no markup)."""
    if not agent.local_mitigation:
        return BidComputation.infeasible()
    sign = 1.0 if violation.direction == "under" else -1.0
    dv = sign * quantize_dv(violation.deviation + agent.target_margin, resolution)
    dev = network.device(agent.device_id)
    comp = dispatch(sens.p(violation.bus, agent.device_bus), sens.q(violation.bus, agent.device_bus),
                    dv, dev, agent.pr_q, pr_p, 1.0, dt)
    return replace(comp, local_cost=comp.cost)


def decide_local_or_market(local_cost: float, winning_effective_bid: float) -> str:
    return "award" if winning_effective_bid < local_cost else "self_mitigate"


def maybe_subcontract(agent: ZonalAgent, initiator: int, pzc_bus: int, dv_target: float,
                      standalone: BidComputation, sens: SensitivityMatrix,
                      network: NetworkModel, neighbor_device_bus: Mapping[int, int],
                      pr_p: float, dt: float, resolution: float = 1e-4) -> SubcontractPlan | None:
    """Hand the part of ``dv_target`` not covered by own reactive power downstream."""
    if agent.subcontract_above is None or not standalone.feasible:
        return None
    if standalone.cost <= agent.subcontract_above:
        return None
    downstream = [n for n in sorted(agent.pzc_buses) if n != initiator]
    if not downstream:
        return None
    dev = network.device(agent.device_id)
    sq = sens.q(pzc_bus, agent.device_bus)
    sign = 1.0 if dv_target > 0 else -1.0
    room = math.sqrt(max(dev.s_max ** 2 - dev.p_set ** 2, 0.0))
    q_lim = min(dev.q_max, room)
    dq = sign * q_lim - dev.q_set if sq > 0 else 0.0
    if sign * dq <= 0:
        return None
    own_dv = sq * dq
    if sign * own_dv >= abs(dv_target):
        return None
    own = BidComputation(True, 0.0, dq, dispatch_cost(0.0, dq, agent.pr_q, pr_p, agent.alpha, dt))
    own = replace(own, price=own.cost)
    residual = dv_target - own_dv
    neighbor = downstream[0]
    npzc = agent.pzc_buses[neighbor]
    nbus = neighbor_device_bus[neighbor]
    den = sens.p(pzc_bus, nbus)
    if den <= 0:
        return None
    target = math.copysign(quantize_dv(residual * sens.p(npzc, nbus) / den, resolution), residual)
    reserve = standalone.cost - own.cost
    if reserve <= 0 or target == 0:
        return None
    return SubcontractPlan(neighbor, npzc, target, reserve, own, standalone)


# -- stage III: actuation ----------------------------------------------------------

@dataclass(frozen=True)
class ActuationResult:
    device: DeviceRecord
    clamped: bool


def clamp_setpoint(dev: DeviceRecord, p: float, q: float) -> tuple[float, float, bool]:
    plo, phi = dev.p_bounds
    p2 = min(max(p, plo), phi)
    q2 = min(max(q, -dev.q_max), dev.q_max)
    if math.hypot(p2, q2) > dev.s_max:
        if abs(p2) >= dev.s_max:
            p2, q2 = math.copysign(dev.s_max, p2), 0.0
        else:
            q2 = math.copysign(math.sqrt(dev.s_max ** 2 - p2 * p2), q2)
    clamped = abs(p2 - p) > 1e-12 or abs(q2 - q) > 1e-12
    return p2, q2, clamped


def act_on_contract(dev: DeviceRecord, comp: BidComputation) -> ActuationResult:
    p, q, clamped = clamp_setpoint(dev, dev.p_set + comp.dp, dev.q_set + comp.dq)
    return ActuationResult(replace(dev, p_set=p, q_set=q), clamped)


# -- revenue --------------------------------------------------------------------

def revenue_active(pr_p: float, p_dg: float, dt: float) -> float:
    return pr_p * p_dg * dt


def revenue_service(pr_q: float, q_dg: float, dt: float, r_dg_lost: float, alpha: float) -> float:
    return pr_q * abs(q_dg) * dt + alpha * r_dg_lost
