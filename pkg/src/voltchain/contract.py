"""Smart contract for the enforcement-extended contract net protocol.

Pure state transitions over :class:`voltchain.ledger.WorldState`. The ledger
calls :func:`validate` at admission, :func:`execute` for each committed
transaction and :func:`end_of_block` once per block, which is where expired
CFPs are assigned and due contracts are enforced.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from voltchain.ledger import (
    DEFAULT_SIGNER,
    BadSignature,
    FrozenRecord,
    InvalidPayload,
    TransactionEnvelope,
    UnknownAgent,
    WorldState,
)

OPEN = "Open"
BIDDING_CLOSED = "BiddingClosed"
ASSIGNED = "Assigned"
ENFORCED_SUCCESS = "EnforcedSuccess"
ENFORCED_FAILURE = "EnforcedFailure"
CANCELLED = "Cancelled"
TERMINAL = frozenset({ENFORCED_SUCCESS, ENFORCED_FAILURE, CANCELLED})

LEGAL_TRANSITIONS = frozenset({
    (OPEN, BIDDING_CLOSED),
    (BIDDING_CLOSED, ASSIGNED),
    (BIDDING_CLOSED, CANCELLED),
    (ASSIGNED, ENFORCED_SUCCESS),
    (ASSIGNED, ENFORCED_FAILURE),
})

DEFAULT_PARAMS: dict[str, Any] = {
    "gamma_success": 1.0,
    "gamma_fail": -10.0,
    "tol_abs": 0.0005,
    "bid_weighting": "divide",
    "g_floor": 0.1,
    "bid_window": 3,
    "enforce_window": 12,
    "dv_resolution": 1e-4,
    "sensitivity_publisher": None,
    "funding": {},
}

_EPS = 1e-12


class ContractError(InvalidPayload):
    pass


class ZoneTaken(ContractError):
    pass


class UnknownCFP(ContractError):
    pass


class Expired(ContractError):
    pass


class Unaffordable(ContractError):
    pass


class NotInvited(ContractError):
    pass


class DuplicateBid(ContractError):
    pass


class PastExpiry(ContractError):
    pass


class ZeroTarget(ContractError):
    pass


class NotExpired(ContractError):
    pass


class AlreadyAssigned(ContractError):
    pass


class NotDue(ContractError):
    pass


class AlreadyEnforced(ContractError):
    pass


class IllegalTransition(ContractError):
    pass


@dataclass
class CFPRecord:
    cfp_id: int
    initiator: int
    targets: dict[int, tuple[int, float]]  # responder -> (pzc bus, signed dv)
    expiry_step: int
    created_step: int
    reserve_price: float | None = None
    parent_cfp: int | None = None
    state: str = OPEN
    history: list[str] = field(default_factory=lambda: [OPEN])
    reason: str = ""

    @property
    def responders(self) -> list[int]:
        return sorted(self.targets)

    @property
    def pzc_bus(self) -> int:
        return self.targets[self.responders[0]][0]

    @property
    def dv_target(self) -> float:
        return self.targets[self.responders[0]][1]

    def move(self, new_state: str) -> None:
        if (self.state, new_state) not in LEGAL_TRANSITIONS:
            raise IllegalTransition(f"CFP {self.cfp_id}: {self.state} -> {new_state}")
        self.state = new_state
        self.history.append(new_state)


@dataclass
class BidRecord:
    cfp_id: int
    responder: int
    price: float
    bid_step: int


@dataclass
class ServiceContract:
    cfp_id: int
    initiator: int
    winner: int
    price: float
    effective_price: float
    pzc_bus: int
    dv_target: float
    assigned_step: int
    enforce_deadline_step: int
    decision: dict[int, int]
    baseline: tuple[float, float] | None
    dv_achieved: float | None = None


def params(state: WorldState) -> dict[str, Any]:
    return {**DEFAULT_PARAMS, **state.params}


def update_reputation(g_prev: float, gamma: float, dv_magnitude: float) -> float:
    if dv_magnitude < 0:
        raise ValueError("voltage deviation magnitude must be non-negative")
    return g_prev + gamma * dv_magnitude


def effective_price(price: float, g: float, weighting: str = "divide", g_floor: float = 0.1) -> float:
    if weighting == "divide":
        return price / max(g, g_floor)
    if weighting == "multiply":
        return price * g
    raise ValueError(f"unknown bid weighting {weighting!r}")


def _log(state: WorldState, cfp_id: int, event: str, agent: int | None = None,
         value: float | None = None) -> None:
    state.events.append({"step": state.step, "cfp_id": cfp_id, "event": event,
                         "agent": agent, "value": value})


def _account(state: WorldState, agent_id: int):
    acct = state.accounts.get(agent_id)
    if acct is None:
        raise UnknownAgent(f"agent {agent_id} is not registered")
    return acct


def zone_message(zone_id: int) -> bytes:
    return f"zone:{zone_id}".encode()


# -- Algorithm functions -------------------------------------------------------

def init_account(state: WorldState, zone_id: int, zone_sig: str,
                 verify: Callable[[str, bytes, str], bool] = DEFAULT_SIGNER.verify) -> tuple[int, float]:
    acct = _account(state, zone_id)
    if acct.initialized:
        raise ZoneTaken(f"zone {zone_id} already has an account")
    if not verify(acct.public_key, zone_message(zone_id), zone_sig):
        raise BadSignature(f"zone {zone_id} claim is not signed by its key")
    acct.initialized = True
    acct.balance = float(params(state)["funding"].get(str(zone_id), 0.0))
    acct.reputation = 1.0
    return zone_id, acct.balance


def _check_create(state: WorldState, initiator: int, targets: dict[int, tuple[int, float]],
                  expiry_step: int, now: int) -> None:
    _account(state, initiator)
    if not targets:
        raise ZeroTarget("CFP has no responders")
    for responder, (_, dv) in targets.items():
        _account(state, responder)
        if responder == initiator:
            raise ContractError("initiator cannot respond to its own CFP")
        if dv == 0:
            raise ZeroTarget(f"zero voltage target for responder {responder}")
    if expiry_step <= now:
        raise PastExpiry(f"expiry {expiry_step} is not after step {now}")


def create_cfp(state: WorldState, initiator: int, targets: dict[int, tuple[int, float]],
               expiry_step: int, reserve_price: float | None = None,
               parent_cfp: int | None = None) -> CFPRecord:
    _check_create(state, initiator, targets, expiry_step, state.step)
    cfp = CFPRecord(state.next_cfp_id, initiator,
                    {int(a): (int(b), float(dv)) for a, (b, dv) in sorted(targets.items())},
                    expiry_step, state.step, reserve_price, parent_cfp)
    state.next_cfp_id += 1
    state.cfps[cfp.cfp_id] = cfp
    state.bids[cfp.cfp_id] = []
    for responder, (_, dv) in cfp.targets.items():
        _log(state, cfp.cfp_id, "cfp", responder, dv)
    return cfp


def _check_reply(state: WorldState, bid: BidRecord) -> CFPRecord:
    cfp = state.cfps.get(bid.cfp_id)
    if cfp is None:
        raise UnknownCFP(f"no CFP {bid.cfp_id}")
    if bid.responder not in cfp.targets:
        raise NotInvited(f"agent {bid.responder} was not invited to CFP {bid.cfp_id}")
    if cfp.state != OPEN or bid.bid_step > cfp.expiry_step:
        raise Expired(f"CFP {bid.cfp_id} stopped accepting bids at step {cfp.expiry_step}")
    if any(b.responder == bid.responder for b in state.bids[bid.cfp_id]):
        raise DuplicateBid(f"agent {bid.responder} already bid on CFP {bid.cfp_id}")
    if not (bid.price >= 0 and math.isfinite(bid.price)):
        raise ContractError("bid price must be a non-negative number")
    if bid.price > _account(state, cfp.initiator).balance:
        raise Unaffordable(f"bid {bid.price} exceeds initiator balance")
    return cfp


def reply_cfp(state: WorldState, bid: BidRecord) -> BidRecord:
    _check_reply(state, bid)
    state.bids[bid.cfp_id].append(bid)
    _log(state, bid.cfp_id, "bid", bid.responder, bid.price)
    return bid


def assign_cfp(state: WorldState, cfp_id: int) -> ServiceContract | None:
    cfp = state.cfps.get(cfp_id)
    if cfp is None:
        raise UnknownCFP(f"no CFP {cfp_id}")
    if cfp.state != OPEN:
        raise AlreadyAssigned(f"CFP {cfp_id} is {cfp.state}")
    if state.step < cfp.expiry_step:
        raise NotExpired(f"CFP {cfp_id} open until step {cfp.expiry_step}")
    p = params(state)
    cfp.move(BIDDING_CLOSED)
    balance = state.accounts[cfp.initiator].balance
    valid = [b for b in state.bids[cfp_id] if b.price <= balance]
    if not valid:
        cfp.move(CANCELLED)
        cfp.reason = "no_bids"
        _log(state, cfp_id, "no_award")
        return None
    ranked = sorted(
        (effective_price(b.price, state.accounts[b.responder].reputation,
                         p["bid_weighting"], p["g_floor"]), b.responder, b) for b in valid)
    eff, winner, bid = ranked[0]
    decision = {b.responder: int(b.responder == winner) for b in state.bids[cfp_id]}
    if cfp.reserve_price is not None and not eff < cfp.reserve_price:
        cfp.move(CANCELLED)
        # a subcontractor's reserve rejects the quote; a top-level reserve means fix it locally
        cfp.reason = "self_mitigate" if cfp.parent_cfp is None else "bid_rejected"
        for agent in sorted(decision):
            _log(state, cfp_id, "dec", agent, 0)
        _log(state, cfp_id, cfp.reason, cfp.initiator, cfp.reserve_price)
        return None
    pzc, dv = cfp.targets[winner]
    device = state.accounts[winner].device
    reading = state.device_readings.get(device) if device else None
    contract = ServiceContract(
        cfp_id, cfp.initiator, winner, bid.price, eff, pzc, dv, state.step,
        state.step + p["enforce_window"], decision,
        (reading["p"], reading["q"]) if reading else None)
    state.contracts[cfp_id] = contract
    cfp.move(ASSIGNED)
    for agent in sorted(decision):
        _log(state, cfp_id, "dec", agent, decision[agent])
    _log(state, cfp_id, "assigned", winner, eff)
    return contract


def _contribution(state: WorldState, contract: ServiceContract, pzc_bus: int) -> float:
    """Voltage change at ``pzc_bus`` implied by the winner's metered P/Q deltas."""
    acct = state.accounts[contract.winner]
    if contract.baseline is None or acct.device is None or state.sensitivity is None:
        return 0.0
    reading = state.device_readings.get(acct.device)
    if reading is None:
        return 0.0
    buses = state.sensitivity["buses"]
    i, j = buses.index(pzc_bus), buses.index(acct.device_bus)
    dp = reading["p"] - contract.baseline[0]
    dq = reading["q"] - contract.baseline[1]
    return state.sensitivity["sp"][i][j] * dp + state.sensitivity["sq"][i][j] * dq


def achieved_dv(state: WorldState, contract: ServiceContract) -> float:
    total = _contribution(state, contract, contract.pzc_bus)
    for child in sorted(state.cfps.values(), key=lambda c: c.cfp_id):
        if child.parent_cfp == contract.cfp_id and child.cfp_id in state.contracts:
            total += _contribution(state, state.contracts[child.cfp_id], contract.pzc_bus)
    return total


def enforcement_succeeds(achieved: float, dv_target: float, tol_abs: float) -> bool:
    """Closed tolerance; overshoot in the requested direction also counts."""
    sign = 1.0 if dv_target > 0 else -1.0
    return sign * achieved >= abs(dv_target) - tol_abs - _EPS


def quantize_dv(value: float, resolution: float) -> float:
    """Round a magnitude up to the on-chain voltage resolution, keeping the sign."""
    steps = math.ceil(abs(value) / resolution - 1e-6)
    return math.copysign(round(steps * resolution, 10), value)


def enforce_cfp(state: WorldState, cfp_id: int) -> str:
    cfp = state.cfps.get(cfp_id)
    if cfp is None:
        raise UnknownCFP(f"no CFP {cfp_id}")
    contract = state.contracts.get(cfp_id)
    if cfp.state != ASSIGNED or contract is None:
        raise AlreadyEnforced(f"CFP {cfp_id} is {cfp.state}")
    if state.step < contract.enforce_deadline_step:
        raise NotDue(f"contract {cfp_id} due at step {contract.enforce_deadline_step}")
    p = params(state)
    achieved = achieved_dv(state, contract)
    contract.dv_achieved = achieved
    winner = state.accounts[contract.winner]
    if enforcement_succeeds(achieved, contract.dv_target, p["tol_abs"]):
        cfp.move(ENFORCED_SUCCESS)
        payer = state.accounts[contract.initiator]
        if payer.balance >= contract.price:
            payer.balance -= contract.price
            winner.balance += contract.price
            _log(state, cfp_id, "payment", contract.winner, contract.price)
        else:
            _log(state, cfp_id, "payment_default", contract.initiator, contract.price)
        winner.reputation = update_reputation(winner.reputation, p["gamma_success"],
                                              abs(contract.dv_target))
        _log(state, cfp_id, "enforced_success", contract.winner, achieved)
        _log(state, cfp_id, "reputation", contract.winner, winner.reputation)
        return ENFORCED_SUCCESS
    cfp.move(ENFORCED_FAILURE)
    winner.reputation = update_reputation(winner.reputation, p["gamma_fail"],
                                          abs(contract.dv_target))
    _log(state, cfp_id, "enforced_failure", contract.winner, achieved)
    _log(state, cfp_id, "reputation", contract.winner, winner.reputation)
    _reissue(state, cfp, contract, achieved)
    return ENFORCED_FAILURE


def _reissue(state: WorldState, cfp: CFPRecord, contract: ServiceContract,
             achieved: float) -> CFPRecord | None:
    """Fresh CFP for the unmet share of the deviation, without the failed winner."""
    p = params(state)
    sign = 1.0 if contract.dv_target > 0 else -1.0
    remaining = min(1.0, max(0.0, 1.0 - sign * achieved / abs(contract.dv_target)))
    targets = {}
    for responder, (bus, dv) in cfp.targets.items():
        if responder == contract.winner:
            continue
        new_dv = quantize_dv(dv * remaining, p["dv_resolution"])
        if new_dv != 0:
            targets[responder] = (bus, new_dv)
    if not targets:
        return None
    new = create_cfp(state, cfp.initiator, targets, state.step + p["bid_window"],
                     cfp.reserve_price, cfp.parent_cfp)
    _log(state, new.cfp_id, "reissue_of", None, cfp.cfp_id)
    return new


# -- ledger executor interface -----------------------------------------------------

def _targets_from_payload(raw: Iterable) -> dict[int, tuple[int, float]]:
    out = {}
    for item in raw:
        agent, bus, dv = item
        out[int(agent)] = (int(bus), float(dv))
    return out


def _require(payload: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in payload]
    extra = set(payload) - set(keys) - {"type"}
    if missing or extra:
        raise InvalidPayload(f"{payload.get('type')}: missing {missing} unexpected {sorted(extra)}")


def validate(state: WorldState, tx: TransactionEnvelope, now: int | None = None) -> None:
    """Read-only admission check; ``now`` defaults to the tx's submission step."""
    now = tx.submitted_step if now is None else now
    pl = tx.payload
    kind = tx.kind
    if kind == "Genesis":
        _require(pl, "members", "params")
    elif kind == "AccountInit":
        _require(pl, "zone", "zone_sig")
        if pl["zone"] != tx.agent_id:
            raise InvalidPayload("agents may only claim their own zone")
        if _account(state, tx.agent_id).initialized:
            raise ZoneTaken(f"zone {tx.agent_id} already has an account")
    elif kind == "MeterReading":
        _require(pl, "bus", "v", "p", "q", "step", "device")
        device = pl["device"]
        if device is not None and device != state.accounts[tx.agent_id].device:
            raise InvalidPayload(f"agent {tx.agent_id} cannot meter device {device}")
        if state.sensitivity is not None and pl["bus"] not in state.sensitivity["buses"]:
            raise InvalidPayload(f"unknown bus {pl['bus']}")
    elif kind == "CreateCFP":
        _require(pl, "targets", "expiry_step", "reserve_price", "parent_cfp")
        _check_create(state, tx.agent_id, _targets_from_payload(pl["targets"]),
                      pl["expiry_step"], now)
        if pl["parent_cfp"] is not None and pl["parent_cfp"] not in state.cfps:
            raise UnknownCFP(f"no parent CFP {pl['parent_cfp']}")
    elif kind == "ReplyCFP":
        _require(pl, "cfp_id", "price")
        _check_reply(state, BidRecord(pl["cfp_id"], tx.agent_id, pl["price"], now))
    elif kind == "SensitivityPublish":
        _require(pl, "buses", "sp", "sq")
        publisher = params(state)["sensitivity_publisher"]
        if publisher is not None and publisher != tx.agent_id:
            raise InvalidPayload(f"agent {tx.agent_id} may not publish sensitivities")
    else:
        raise InvalidPayload(f"payload type {kind!r} is not executable")


def execute(state: WorldState, tx: TransactionEnvelope) -> None:
    validate(state, tx, now=state.step)
    pl = tx.payload
    kind = tx.kind
    if kind == "Genesis":
        state.params = {**DEFAULT_PARAMS, **pl["params"]}
        for agent_id, info in sorted(pl["members"].items(), key=lambda kv: int(kv[0])):
            state.register_agent(int(agent_id), info["public_key"], device=info.get("device"),
                                 device_bus=info.get("device_bus"))
    elif kind == "AccountInit":
        init_account(state, pl["zone"], pl["zone_sig"])
    elif kind == "MeterReading":
        reading = {k: pl[k] for k in ("bus", "v", "p", "q", "step")}
        reading["agent"] = tx.agent_id
        if pl["device"] is None:
            state.bus_readings[pl["bus"]] = reading
        else:
            state.device_readings[pl["device"]] = reading
    elif kind == "CreateCFP":
        create_cfp(state, tx.agent_id, _targets_from_payload(pl["targets"]), pl["expiry_step"],
                   pl["reserve_price"], pl["parent_cfp"])
    elif kind == "ReplyCFP":
        reply_cfp(state, BidRecord(pl["cfp_id"], tx.agent_id, float(pl["price"]), state.step))
    elif kind == "SensitivityPublish":
        state.sensitivity = FrozenRecord({"buses": tuple(pl["buses"]),
                                          "sp": tuple(tuple(r) for r in pl["sp"]),
                                          "sq": tuple(tuple(r) for r in pl["sq"])})


def end_of_block(state: WorldState, step: int) -> None:
    """Contract auto-execution: assign expired CFPs, then enforce due contracts."""
    state.step = step
    for cfp_id in sorted(state.cfps):
        cfp = state.cfps[cfp_id]
        if cfp.state == OPEN and step >= cfp.expiry_step:
            assign_cfp(state, cfp_id)
    for cfp_id in sorted(state.contracts):
        if state.cfps[cfp_id].state == ASSIGNED and step >= state.contracts[cfp_id].enforce_deadline_step:
            enforce_cfp(state, cfp_id)
