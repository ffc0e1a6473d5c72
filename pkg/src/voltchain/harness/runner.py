"""Time-stepped simulation wiring grid, agents, ledger replicas and the contract."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from voltchain import agent as ag
from voltchain import contract as ct
from voltchain.grid import (
    BusRecord,
    DeviceRecord,
    LineRecord,
    NetworkModel,
    OperatingPoint,
    SensitivityMatrix,
    build_sensitivity,
    solve_voltage,
)
from voltchain.harness.bus import MessageBus
from voltchain.harness.scenario import ScenarioConfig
from voltchain.ledger import (
    DEFAULT_SIGNER,
    Block,
    LedgerNode,
    TxRejected,
    WorldState,
    make_block,
    make_transaction,
    replay_chain,
    ZERO_HASH,
)

log = logging.getLogger(__name__)

GENESIS_STEP = -1


class ReplicaDivergence(Exception):
    pass


@dataclass
class RunReport:
    scenario: str
    voltages: list[tuple[int, int, float]] = field(default_factory=list)
    contracts: list[dict] = field(default_factory=list)
    reputation: list[tuple[int, int, float]] = field(default_factory=list)
    wallets: list[tuple[int, int, float]] = field(default_factory=list)
    income: list[tuple[int, int, float]] = field(default_factory=list)
    cnp_log: list[dict] = field(default_factory=list)
    chain: list[Block] = field(default_factory=list)
    digests: list[list[str]] = field(default_factory=list)
    rejections: list[tuple[int, str, str]] = field(default_factory=list)
    actuations: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    violation_episodes: list[dict] = field(default_factory=list)
    cycle_steps: int = 0


def ledger_rows(state: WorldState, step: int) -> tuple[list, list]:
    rep = [(step, a, state.accounts[a].reputation) for a in sorted(state.accounts)]
    wal = [(step, a, state.accounts[a].balance) for a in sorted(state.accounts)]
    return rep, wal


def contract_rows(state: WorldState) -> list[dict]:
    rows = []
    for cfp_id in sorted(state.cfps):
        cfp = state.cfps[cfp_id]
        sc = state.contracts.get(cfp_id)
        rows.append({
            "cfp_id": cfp_id,
            "initiator": cfp.initiator,
            "winner": "" if sc is None else sc.winner,
            "price": "" if sc is None else sc.price,
            "dv_target": cfp.dv_target if sc is None else sc.dv_target,
            "dv_achieved": "" if sc is None or sc.dv_achieved is None else sc.dv_achieved,
            "status": cfp.state,
        })
    return rows


def build_network(cfg: ScenarioConfig) -> NetworkModel:
    devs: dict[int, list[DeviceRecord]] = {}
    for d in cfg.dg_settings:
        s_max = d.s_max if d.s_max is not None else max(d.p_max, d.q_max)
        devs.setdefault(d.bus, []).append(DeviceRecord(
            d.id, d.kind, d.p_max, d.q_max, s_max, d.p_set, d.q_set, d.p_avail))
    buses = tuple(BusRecord(b.id, b.v_min, b.v_max, b.load_p, b.load_q, tuple(devs.get(b.id, ())))
                  for b in cfg.topology.buses)
    lines = tuple(LineRecord(ln.id, ln.from_bus, ln.to_bus, ln.r, ln.x, ln.i_cap)
                  for ln in cfg.topology.lines)
    return NetworkModel(buses, lines, cfg.topology.root)


def build_agents(cfg: ScenarioConfig, network: NetworkModel, signer=DEFAULT_SIGNER) -> dict[int, ag.ZonalAgent]:
    agents = {}
    zone_ids = sorted(z.id for z in cfg.zones)
    for z in sorted(cfg.zones, key=lambda z: z.id):
        dg = next(d for d in cfg.dg_settings if d.zone == z.id)
        buses = frozenset(z.buses)
        lines = (frozenset(z.lines) if z.lines is not None else
                 frozenset(ln.id for ln in network.lines if ln.from_bus in buses and ln.to_bus in buses))
        # a shared PZC bus is monitored by the lower-numbered zone
        owned = frozenset(b for b in buses
                          if not any(bus == b and nb < z.id for nb, bus in z.pzc.items()))
        agents[z.id] = ag.ZonalAgent(
            agent_id=z.id, zone_buses=buses, zone_lines=lines, pzc_buses=dict(z.pzc),
            device_id=dg.id, device_bus=dg.bus, pr_q=dg.pr_q, alpha=dg.alpha,
            owned_buses=owned, keys=signer.keypair(f"{cfg.params.seed}:agent:{z.id}".encode()),
            bid_markup=z.bid_markup, subcontract_above=z.subcontract_above,
            local_mitigation=z.local_mitigation, target_margin=z.target_margin)
    assert list(agents) == zone_ids
    return agents


@dataclass
class _Offset:
    dp: float
    dq: float
    release_step: int


class Simulation:
    def __init__(self, cfg: ScenarioConfig, signer=DEFAULT_SIGNER):
        self.cfg = cfg
        self.p = cfg.params
        self.signer = signer
        self.base_network = build_network(cfg)
        self.agents = build_agents(cfg, self.base_network, signer)
        self.neighbor_device_bus = {a.agent_id: a.device_bus for a in self.agents.values()}
        self.sens = build_sensitivity(self.base_network)
        self.nodes = [LedgerNode(f"node{i}", i, self.p.nodes, self.p.B_M, signer)
                      for i in range(self.p.nodes)]
        self.bus = MessageBus(self.p.latency)
        self.report = RunReport(cfg.name)
        self.report.cycle_steps = self.p.bid_window + self.p.enforce_window
        # mutable physical state
        self.loads = {b.id: (b.load_p, b.load_q) for b in self.base_network.buses}
        self.devices = {d.id: self.base_network.device(d.id) for d in cfg.dg_settings}
        self.base_p = {d.id: (d.p_avail if d.p_avail is not None and d.kind == "generator" else d.p_set)
                       for d in self.devices.values()}
        self.base_q = {d.id: d.q_set for d in self.devices.values()}
        self.offline: dict[str, DeviceRecord] = {}
        self.offsets: dict[str, dict[tuple, _Offset]] = {d: {} for d in self.devices}
        self.faults: dict[int, int] = {}
        self.actuated: set[int] = set()
        self.self_mitigated: set[int] = set()
        self.network = self.base_network

    # -- helpers ---------------------------------------------------------------
    def agent_node(self, agent_id: int) -> LedgerNode:
        return self.nodes[(agent_id - 1) % len(self.nodes)]

    def price(self, step: int) -> float:
        series = self.cfg.price_series
        return series[min(int(step * self.p.dt_hours), len(series) - 1)]

    @property
    def contract_hours(self) -> float:
        return self.p.enforce_window * self.p.dt_hours

    def _tx(self, a: ag.ZonalAgent, payload: dict, step: int):
        return make_transaction(a.agent_id, a.next_nonce(), payload, step, a.keys, self.signer)

    def _send(self, a: ag.ZonalAgent, payload: dict, step: int) -> None:
        tx = self._tx(a, payload, step)
        self.bus.broadcast(("agent", a.agent_id), [("node", i) for i in range(len(self.nodes))],
                           tx, step)

    # -- genesis ---------------------------------------------------------------
    def genesis(self) -> Block:
        members = {str(a.agent_id): {"public_key": a.keys.public_key, "device": a.device_id,
                                     "device_bus": a.device_bus}
                   for a in self.agents.values()}
        publisher = min(self.agents)
        params = {"gamma_success": self.p.gamma_success, "gamma_fail": self.p.gamma_fail,
                  "tol_abs": self.p.tol_abs, "bid_weighting": self.p.bid_weighting,
                  "g_floor": self.p.g_floor, "bid_window": self.p.bid_window,
                  "enforce_window": self.p.enforce_window, "dv_resolution": self.p.dv_resolution,
                  "sensitivity_publisher": publisher,
                  "funding": {str(a): self.p.genesis_funding for a in self.agents}}
        txs = [make_transaction(0, 0, {"type": "Genesis", "members": members, "params": params},
                                GENESIS_STEP, None)]
        for a in self.agents.values():
            sig = self.signer.sign(a.keys.secret_key, ct.zone_message(a.agent_id))
            txs.append(self._tx(a, {"type": "AccountInit", "zone": a.agent_id, "zone_sig": sig},
                                GENESIS_STEP))
        sens = self.sens.to_dict()
        txs.append(self._tx(self.agents[publisher],
                            {"type": "SensitivityPublish", **sens}, GENESIS_STEP))
        txs.sort(key=lambda t: t.sort_key())
        block = make_block(0, ZERO_HASH, GENESIS_STEP, txs)
        for node in self.nodes:
            node.apply_block(block)
        self._check_replicas(block)
        return block

    # -- physical state ------------------------------------------------------------
    def _apply_event(self, ev) -> None:
        if ev.kind == "dg_outage_start":
            self.offline[ev.device] = self.devices[ev.device]
        elif ev.kind == "dg_outage_end":
            self.offline.pop(ev.device, None)
        elif ev.kind == "irradiance_set":
            self.base_p[ev.device] = ev.value
        elif ev.kind == "load_set":
            self.loads[ev.bus] = (ev.p, ev.q)
        elif ev.kind == "actuation_fault":
            self.faults[ev.zone] = self.faults.get(ev.zone, 0) + 1
        log.debug("step %d event %s", ev.step, ev.kind)

    def _refresh_devices(self, step: int) -> None:
        for dev_id, dev in self.devices.items():
            offs = self.offsets[dev_id]
            for key in [k for k, o in offs.items() if o.release_step <= step]:
                del offs[key]
            if dev_id in self.offline:
                self.devices[dev_id] = replace(dev, p_avail=0.0, p_set=0.0, q_set=0.0, q_max=0.0)
                continue
            orig = self.base_network.device(dev_id)
            avail = self.base_p[dev_id] if dev.kind == "generator" else orig.p_avail
            cur = replace(orig, p_avail=avail)
            base = self.base_p[dev_id]
            p = base + sum(o.dp for o in offs.values())
            q = self.base_q[dev_id] + sum(o.dq for o in offs.values())
            p, q, _ = ag.clamp_setpoint(cur, p, q)
            self.devices[dev_id] = replace(cur, p_set=p, q_set=q)
        self.network = self.base_network.with_state(self.loads, self.devices)

    def _actuate(self, step: int) -> None:
        for aid, a in self.agents.items():
            state = self.agent_node(aid).state
            for cfp_id in sorted(state.contracts):
                sc = state.contracts[cfp_id]
                if sc.winner != aid or cfp_id in self.actuated or state.cfps[cfp_id].state != ct.ASSIGNED:
                    continue
                self.actuated.add(cfp_id)
                comp = a.bids.get(cfp_id)
                if self.faults.get(aid):
                    self.faults[aid] -= 1
                    self.report.actuations.append({"step": step, "agent": aid, "cfp_id": cfp_id,
                                                   "dp": 0.0, "dq": 0.0, "fault": True})
                    continue
                if comp is None:
                    continue
                res = ag.act_on_contract(self.devices[a.device_id], comp)
                self.offsets[a.device_id][("contract", cfp_id)] = _Offset(
                    comp.dp, comp.dq, step + self.p.service_steps)
                self.report.actuations.append({"step": step, "agent": aid, "cfp_id": cfp_id,
                                               "dp": comp.dp, "dq": comp.dq, "fault": False,
                                               "clamped": res.clamped})
            for cfp_id in sorted(state.cfps):
                cfp = state.cfps[cfp_id]
                if (cfp.initiator != aid or cfp.reason != "self_mitigate"
                        or cfp.parent_cfp is not None or cfp_id in self.self_mitigated):
                    continue
                self.self_mitigated.add(cfp_id)
                viol = self._worst(a, step)
                if viol is None:
                    continue
                local = ag.local_mitigation(a, viol, self.sens, self.network, self.price(step),
                                            self.contract_hours, self.p.dv_resolution)
                if local.feasible:
                    self.offsets[a.device_id][("local", cfp_id)] = _Offset(
                        local.dp, local.dq, step + self.p.service_steps)
                    self.report.actuations.append({"step": step, "agent": aid, "cfp_id": cfp_id,
                                                   "dp": local.dp, "dq": local.dq,
                                                   "fault": False, "local": True})

    def _worst(self, a: ag.ZonalAgent, step: int):
        prof = solve_voltage(self.network, OperatingPoint.from_network(self.network), step)
        zone_v = {b: prof.v[b] for b in a.meter_buses}
        return ag.worst_violation(ag.zone_violations(a, self.network, zone_v, step))

    # -- agent behaviour --------------------------------------------------------------
    def _initiate(self, a: ag.ZonalAgent, viol: ag.ViolationReport, state: WorldState, step: int) -> None:
        busy = any(c.initiator == a.agent_id and c.parent_cfp is None and c.state not in ct.TERMINAL
                   for c in state.cfps.values())
        if busy:
            return
        targets = ag.compute_pzc_targets(a, viol, self.sens, self.neighbor_device_bus,
                                         self.p.dv_resolution)
        if not targets:
            self.report.warnings.append(f"step {step}: agent {a.agent_id} has no neighbour able "
                                        f"to help with bus {viol.bus}")
            return
        local = ag.local_mitigation(a, viol, self.sens, self.network, self.price(step),
                                    self.contract_hours, self.p.dv_resolution)
        self._send(a, {"type": "CreateCFP",
                       "targets": [[n, bus, dv] for n, (bus, dv) in sorted(targets.items())],
                       "expiry_step": step + self.p.bid_window,
                       "reserve_price": local.cost if local.feasible else None,
                       "parent_cfp": None}, step)

    def _respond(self, a: ag.ZonalAgent, state: WorldState, step: int) -> None:
        pr_p = self.price(step)
        for cfp_id in sorted(state.cfps):
            cfp = state.cfps[cfp_id]
            if (cfp.state != ct.OPEN or a.agent_id not in cfp.targets or cfp_id in a.replied
                    or step > cfp.expiry_step):
                continue
            pzc, dv = cfp.targets[a.agent_id]
            plan = a.subcontracts.get(cfp_id)
            if plan is not None:
                nested = [c for c in state.cfps.values()
                          if c.parent_cfp == cfp_id and c.initiator == a.agent_id]
                done = nested and nested[0].state != ct.OPEN
                if not done and step < cfp.expiry_step:
                    continue
                sub = state.contracts.get(nested[0].cfp_id) if nested else None
                if sub is not None:
                    comp = replace(plan.own, price=ag.quote(a, plan.own.cost + sub.price))
                else:
                    comp = replace(plan.standalone,
                                   price=ag.quote(a, plan.standalone.cost))
                self._bid(a, cfp, comp, state, step)
                continue
            comp = ag.evaluate_cfp(a, pzc, dv, self.sens, self.network, pr_p, self.contract_hours)
            if not comp.feasible:
                a.replied.add(cfp_id)
                continue
            if cfp.parent_cfp is None and cfp.expiry_step - 1 > step:
                plan = ag.maybe_subcontract(a, cfp.initiator, pzc, dv, comp, self.sens, self.network,
                                            self.neighbor_device_bus, pr_p, self.contract_hours,
                                            self.p.dv_resolution)
                if plan is not None:
                    a.subcontracts[cfp_id] = plan
                    self._send(a, {"type": "CreateCFP",
                                   "targets": [[plan.neighbor, plan.pzc_bus, plan.dv_target]],
                                   "expiry_step": cfp.expiry_step - 1,
                                   "reserve_price": plan.reserve_price,
                                   "parent_cfp": cfp_id}, step)
                    continue
            self._bid(a, cfp, comp, state, step)

    def _bid(self, a: ag.ZonalAgent, cfp, comp: ag.BidComputation, state: WorldState, step: int) -> None:
        a.replied.add(cfp.cfp_id)
        if comp.price > state.accounts[cfp.initiator].balance:
            return
        a.bids[cfp.cfp_id] = comp
        self._send(a, {"type": "ReplyCFP", "cfp_id": cfp.cfp_id, "price": comp.price}, step)

    # -- consensus ---------------------------------------------------------------------
    def _deliver(self, step: int) -> None:
        for msg in self.bus.deliver(step):
            kind, idx = msg.receiver
            node = self.nodes[idx]
            try:
                node.submit_transaction(msg.body)
            except TxRejected as exc:
                if idx == 0:
                    self.report.rejections.append((step, msg.body.tx_id, f"{type(exc).__name__}: {exc}"))

    def _check_replicas(self, block: Block) -> None:
        digests = [n.state.digest() for n in self.nodes]
        self.report.digests.append(digests)
        if len(set(digests)) != 1:
            raise ReplicaDivergence(f"replica states differ after block {block.index}")

    def _seal(self, step: int) -> Block:
        proposer = self.nodes[step % len(self.nodes)]
        block = proposer.seal_block(step)
        for node in self.nodes:
            if node is not proposer:
                node.apply_block(block)
        self._check_replicas(block)
        return block

    # -- main loop ----------------------------------------------------------------------
    def run(self) -> RunReport:
        rep = self.report
        rep.chain.append(self.genesis())
        events = sorted(self.cfg.events, key=lambda e: e.step)
        for step in range(self.p.steps):
            for ev in events:
                if ev.step == step:
                    self._apply_event(ev)
            self._refresh_devices(step)
            self._actuate(step)
            self._refresh_devices(step)
            op = OperatingPoint.from_network(self.network)
            profile = solve_voltage(self.network, op, step)
            for b in sorted(profile.v):
                rep.voltages.append((step, b, profile.v[b]))
            for aid, a in self.agents.items():
                zone_v, payloads = ag.read_zone_state(a, self.network, profile, step)
                for pl in payloads:
                    self._send(a, pl, step)
                viol = ag.worst_violation(ag.zone_violations(a, self.network, zone_v, step))
                if viol is not None:
                    self._initiate(a, viol, self.agent_node(aid).state, step)
            for aid, a in self.agents.items():
                self._respond(a, self.agent_node(aid).state, step)
            self._deliver(step)
            rep.chain.append(self._seal(step))
            state = self.nodes[0].state
            r, w = ledger_rows(state, step)
            rep.reputation.extend(r)
            rep.wallets.extend(w)
            pr_p = self.price(step)
            for aid, a in self.agents.items():
                p_dg = max(self.devices[a.device_id].p_set, 0.0)
                rep.income.append((step, aid, ag.revenue_active(pr_p, p_dg, self.p.dt_hours)))
        final = self.nodes[0].state
        rep.contracts = contract_rows(final)
        rep.cnp_log = list(final.events)
        self._safety(rep)
        return rep

    def _safety(self, rep: RunReport) -> None:
        limit = 2 * rep.cycle_steps
        limits = {b.id: (b.v_min, b.v_max) for b in self.base_network.buses}
        open_at: dict[int, int] = {}
        for step, bus, v in rep.voltages:
            lo, hi = limits[bus]
            bad = v < lo or v > hi
            if bad and bus not in open_at:
                open_at[bus] = step
            elif not bad and bus in open_at:
                start = open_at.pop(bus)
                rep.violation_episodes.append({"bus": bus, "start": start, "cleared": step})
                if step - start > limit:
                    rep.warnings.append(f"bus {bus}: violation from step {start} took "
                                        f"{step - start} steps to clear (limit {limit})")
        for bus, start in sorted(open_at.items()):
            rep.violation_episodes.append({"bus": bus, "start": start, "cleared": None})
            rep.warnings.append(f"bus {bus}: violation from step {start} unresolved at end of run")


def run_simulation(cfg: ScenarioConfig, **overrides) -> RunReport:
    """Run a scenario; keyword overrides replace fields of ``cfg.params``."""
    if overrides:
        cfg = cfg.model_copy(update={"params": cfg.params.model_copy(update=overrides)})
    return Simulation(cfg).run()


def replay_traces(chain: list[Block], signer=DEFAULT_SIGNER) -> tuple[list, list]:
    """Reputation and wallet rows rebuilt from the chain alone."""
    rep: list = []
    wal: list = []

    def collect(block: Block, state: WorldState) -> None:
        if block.timestamp >= 0:
            r, w = ledger_rows(state, block.timestamp)
            rep.extend(r)
            wal.extend(w)

    replay_chain(chain, signer=signer, on_block=collect)
    return rep, wal


def sensitivity_from_state(state: WorldState) -> SensitivityMatrix:
    return SensitivityMatrix.from_dict(state.sensitivity)
