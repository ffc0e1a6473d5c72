import random

import pytest
from hypothesis import strategies as st

from voltchain import contract as _ct
from voltchain.grid import BusRecord, DeviceRecord, LineRecord, NetworkModel
from voltchain.harness.runner import Simulation, run_simulation
from voltchain.harness.scenario import load_scenario
from voltchain.ledger import DEFAULT_SIGNER, ZERO_HASH, LedgerNode, make_block, make_transaction


def chain_network(r_values, x_values=None, loads=None, devices=None, root=1):
    """Feeder 1-2-...-n with the given per-line impedances."""
    n = len(r_values) + 1
    x_values = x_values or r_values
    loads = loads or {}
    devices = devices or {}
    buses = tuple(BusRecord(b, load_p=loads.get(b, (0.0, 0.0))[0], load_q=loads.get(b, (0.0, 0.0))[1],
                            devices=tuple(devices.get(b, ())))
                  for b in range(1, n + 1))
    lines = tuple(LineRecord(f"L{b}", b, b + 1, r, x)
                  for b, r, x in zip(range(1, n), r_values, x_values))
    return NetworkModel(buses, lines, root)


def random_tree(rng: random.Random, n: int) -> NetworkModel:
    """Random radial tree with random loads and one device per few buses."""
    buses = []
    lines = []
    for b in range(1, n + 1):
        devs = ()
        if b > 1 and rng.random() < 0.25:
            p = rng.uniform(0, 0.5)
            devs = (DeviceRecord(f"D{b}", "generator", 1.0, 0.5, 1.2, p, rng.uniform(-0.3, 0.3), 1.0),)
        buses.append(BusRecord(b, load_p=rng.uniform(0, 0.2) if b > 1 else 0.0,
                               load_q=rng.uniform(0, 0.1) if b > 1 else 0.0, devices=devs))
        if b > 1:
            parent = rng.randint(1, b - 1)
            a, c = (parent, b) if rng.random() < 0.5 else (b, parent)
            lines.append(LineRecord(f"L{b}", a, c, rng.uniform(0.001, 0.05), rng.uniform(0.0, 0.05)))
    order = list(range(len(buses)))
    rng.shuffle(order)
    return NetworkModel(tuple(buses[i] for i in order), tuple(lines), 1)


@st.composite
def radial_trees(draw, max_buses=40):
    seed = draw(st.integers(0, 2**31 - 1))
    n = draw(st.integers(2, max_buses))
    return random_tree(random.Random(seed), n)


@pytest.fixture(scope="session")
def ieee_cfg():
    return load_scenario("ieee_4zone")


@pytest.fixture(scope="session")
def over_cfg():
    return load_scenario("ieee_4zone_overvoltage")


@pytest.fixture(scope="session")
def kcm_cfg():
    return load_scenario("kcm_microgrid")


@pytest.fixture(scope="session")
def ieee_report(ieee_cfg):
    return run_simulation(ieee_cfg)


@pytest.fixture(scope="session")
def over_report(over_cfg):
    return run_simulation(over_cfg)


@pytest.fixture(scope="session")
def kcm_report(kcm_cfg):
    return run_simulation(kcm_cfg)


# -- ledger helpers ------------------------------------------------------------


class Cluster:
    """A few ledger replicas sharing a genesis block, plus agent keys."""

    def __init__(self, n_agents=3, n_nodes=4, funding=10_000.0, block_max=128, **params):
        self.keys = {a: DEFAULT_SIGNER.keypair(f"test:{a}".encode()) for a in range(1, n_agents + 1)}
        self.nonce = {a: 0 for a in self.keys}
        self.nodes = [LedgerNode(f"n{i}", i, n_nodes, block_max) for i in range(n_nodes)]
        members = {str(a): {"public_key": k.public_key, "device": f"D{a}", "device_bus": a + 1}
                   for a, k in self.keys.items()}
        p = {"funding": {str(a): funding for a in self.keys}, **params}
        txs = [make_transaction(0, 0, {"type": "Genesis", "members": members, "params": p}, -1, None)]
        for a, k in self.keys.items():
            sig = DEFAULT_SIGNER.sign(k.secret_key, _ct.zone_message(a))
            txs.append(self.tx(a, {"type": "AccountInit", "zone": a, "zone_sig": sig}, -1))
        self.genesis = make_block(0, ZERO_HASH, -1, sorted(txs, key=lambda t: t.sort_key()))
        for node in self.nodes:
            node.apply_block(self.genesis)

    def tx(self, agent, payload, step):
        self.nonce[agent] += 1
        return make_transaction(agent, self.nonce[agent], payload, step, self.keys[agent])

    def submit(self, tx):
        for node in self.nodes:
            node.submit_transaction(tx)

    def step(self, step):
        proposer = self.nodes[step % len(self.nodes)]
        block = proposer.seal_block(step)
        for node in self.nodes:
            if node is not proposer:
                node.apply_block(block)
        return block

    def meter(self, agent, step, p=0.0, q=0.0, bus=None):
        return self.tx(agent, {"type": "MeterReading", "bus": bus or agent + 1, "v": 1.0, "p": p, "q": q,
                               "step": step, "device": f"D{agent}"}, step)

    @property
    def state(self):
        return self.nodes[0].state


def sim_at(cfg, step):
    """Simulation advanced through ``step`` (inclusive)."""
    cfg = cfg.model_copy(update={"params": cfg.params.model_copy(update={"steps": step + 1})})
    sim = Simulation(cfg)
    sim.run()
    return sim


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
