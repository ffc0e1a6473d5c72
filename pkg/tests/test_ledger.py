import random

import pytest

from conftest import Cluster
from voltchain.ledger import (
    DEFAULT_SIGNER,
    BadSignature,
    Block,
    ChainParseError,
    DuplicateAgent,
    HashMismatch,
    InvalidPayload,
    InvalidTx,
    LedgerNode,
    NotProposer,
    RegistrationClosed,
    StaleBlock,
    TransactionEnvelope,
    UnknownAgent,
    UnknownKey,
    ZERO_HASH,
    canonical_json,
    make_block,
    make_transaction,
    parse_chain,
    replay_chain,
    serialize_chain,
    verify_chain,
)


@pytest.fixture
def cluster():
    return Cluster()


def grow(cluster, steps):
    chain = [cluster.genesis]
    for t in range(steps):
        for a in cluster.keys:
            cluster.submit(cluster.meter(a, t, p=0.1 * a, q=0.01 * t))
        chain.append(cluster.step(t))
    return chain


class TestSerialization:
    def test_canonical_json_is_sorted_and_compact(self):
        assert canonical_json({"b": 1, "a": [1.5, None]}) == '{"a":[1.5,null],"b":1}'

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            canonical_json({"x": float("nan")})

    def test_block_round_trip_is_byte_exact(self, cluster):
        chain = grow(cluster, 5)
        text = serialize_chain(chain)
        assert serialize_chain(parse_chain(text)) == text
        assert parse_chain(text) == chain

    def test_non_canonical_line_rejected(self, cluster):
        line = grow(cluster, 1)[1].to_line()
        with pytest.raises(ValueError):
            Block.from_line(line.replace(",", ", ", 1))

    def test_truncated_file(self, cluster):
        text = serialize_chain(grow(cluster, 3))
        with pytest.raises(ChainParseError) as exc:
            parse_chain(text[:-10])
        assert exc.value.line == 3


class TestSignatures:
    def test_keys_are_deterministic(self):
        assert DEFAULT_SIGNER.keypair(b"x") == DEFAULT_SIGNER.keypair(b"x")
        assert DEFAULT_SIGNER.keypair(b"x") != DEFAULT_SIGNER.keypair(b"y")

    def test_valid_meter_reading_accepted(self, cluster):
        tx = cluster.meter(1, 0)
        assert cluster.nodes[0].submit_transaction(tx) is tx

    def test_foreign_key_rejected(self, cluster):
        forged = make_transaction(1, 1, {"type": "MeterReading", "bus": 2, "v": 1.0, "p": 0, "q": 0,
                                         "step": 0, "device": "D1"}, 0, cluster.keys[2])
        with pytest.raises(BadSignature):
            cluster.nodes[0].submit_transaction(forged)

    def test_unknown_agent(self, cluster):
        tx = make_transaction(9, 1, {"type": "MeterReading", "bus": 2, "v": 1.0, "p": 0, "q": 0,
                                     "step": 0, "device": None}, 0,
                              DEFAULT_SIGNER.keypair(b"stranger"))
        with pytest.raises(UnknownAgent):
            cluster.nodes[0].submit_transaction(tx)

    def test_nonce_replay_rejected(self, cluster):
        tx = cluster.meter(1, 0)
        cluster.submit(tx)
        cluster.step(0)
        with pytest.raises(InvalidPayload):
            cluster.nodes[1].submit_transaction(tx)

    def test_metering_someone_elses_device(self, cluster):
        tx = cluster.tx(1, {"type": "MeterReading", "bus": 2, "v": 1.0, "p": 0, "q": 0, "step": 0,
                            "device": "D2"}, 0)
        with pytest.raises(InvalidPayload):
            cluster.nodes[0].submit_transaction(tx)

    def test_unaffordable_bid_rejected_at_admission(self, cluster):
        cluster.submit(cluster.tx(2, {"type": "CreateCFP", "targets": [[1, 2, 0.0033]], "expiry_step": 3,
                                      "reserve_price": None, "parent_cfp": None}, 0))
        cluster.step(0)
        with pytest.raises(InvalidPayload):
            cluster.nodes[0].submit_transaction(
                cluster.tx(1, {"type": "ReplyCFP", "cfp_id": 1, "price": 12_000.0}, 1))


class TestMembership:
    def test_genesis_accounts(self, cluster):
        assert sorted(cluster.state.accounts) == [1, 2, 3]
        assert all(a.reputation == 1.0 and a.balance == 10_000.0 for a in cluster.state.accounts.values())

    def test_duplicate_registration(self):
        node = LedgerNode("n")
        node.register_agent(1, "aa")
        with pytest.raises(DuplicateAgent):
            node.register_agent(1, "aa")

    def test_registration_closed_after_genesis(self, cluster):
        with pytest.raises(RegistrationClosed):
            cluster.nodes[0].register_agent(7, "bb")

    def test_second_genesis_rejected(self, cluster):
        g = make_transaction(0, 0, {"type": "Genesis", "members": {}, "params": {}}, 0, None)
        with pytest.raises(InvalidPayload):
            cluster.nodes[0].submit_transaction(g)


class TestBlocks:
    def test_heartbeat_block(self, cluster):
        b = cluster.step(0)
        assert b.txs == () and b.index == 1

    def test_only_proposer_seals(self, cluster):
        with pytest.raises(NotProposer):
            cluster.nodes[1].seal_block(0)

    def test_block_cap(self):
        c = Cluster(n_agents=1, block_max=4)
        for _ in range(9):
            c.submit(c.meter(1, 0))
        b = c.step(0)
        assert len(b.txs) == 4
        assert all(len(n.mempool) == 5 for n in c.nodes)
        assert len(c.step(1).txs) == 4

    def test_two_proposers_seal_identical_blocks(self):
        blocks = []
        for _ in range(2):
            c = Cluster()
            for a in reversed(list(c.keys)):
                c.submit(c.meter(a, 0))
            blocks.append(c.nodes[0].seal_block(0))
        b1, b2 = blocks
        assert b1.to_line() == b2.to_line()

    def test_replicas_agree(self, cluster):
        grow(cluster, 6)
        digests = {n.state.digest() for n in cluster.nodes}
        assert len(digests) == 1

    def test_tampered_block_rejected(self, cluster):
        for a in cluster.keys:
            cluster.submit(cluster.meter(a, 0))
        block = cluster.nodes[0].seal_block(0)
        tx = block.txs[0]
        bad_tx = TransactionEnvelope(tx.tx_id, tx.agent_id, {**tx.payload, "v": 0.5}, tx.signature,
                                     tx.submitted_step)
        bad = Block(block.index, block.prev_hash, block.timestamp, (bad_tx,) + block.txs[1:],
                    block.block_hash)
        with pytest.raises(HashMismatch):
            cluster.nodes[1].apply_block(bad)

    def test_resigned_forgery_fails_signature(self, cluster):
        for a in cluster.keys:
            cluster.submit(cluster.meter(a, 0))
        block = cluster.nodes[0].seal_block(0)
        tx = block.txs[0]
        bad_tx = TransactionEnvelope(tx.tx_id, tx.agent_id, {**tx.payload, "v": 0.5}, tx.signature,
                                     tx.submitted_step)
        forged = make_block(block.index, block.prev_hash, block.timestamp, (bad_tx,) + block.txs[1:])
        with pytest.raises(InvalidTx):
            cluster.nodes[1].apply_block(forged)

    def test_replayed_block_is_stale(self, cluster):
        b = cluster.step(0)
        with pytest.raises(StaleBlock):
            cluster.nodes[1].apply_block(b)

    def test_unordered_block_rejected(self, cluster):
        for a in cluster.keys:
            cluster.submit(cluster.meter(a, 0))
        block = cluster.nodes[0].seal_block(0)
        shuffled = make_block(block.index, block.prev_hash, block.timestamp, tuple(reversed(block.txs)))
        with pytest.raises(InvalidTx):
            cluster.nodes[1].apply_block(shuffled)


class TestVerifyChain:
    def test_intact(self, cluster):
        assert verify_chain(grow(cluster, 99)) is None

    def test_payload_mutation(self, cluster):
        chain = grow(cluster, 12)
        b = chain[7]
        tx = b.txs[0]
        mutated = TransactionEnvelope(tx.tx_id, tx.agent_id, {**tx.payload, "p": 9.0}, tx.signature,
                                      tx.submitted_step)
        chain[7] = Block(b.index, b.prev_hash, b.timestamp, (mutated,) + b.txs[1:], b.block_hash)
        assert verify_chain(chain) == 7

    def test_swap(self, cluster):
        chain = grow(cluster, 10)
        chain[5], chain[6] = chain[6], chain[5]
        assert verify_chain(chain) == 5

    def test_rehashed_block_breaks_next_link(self, cluster):
        chain = grow(cluster, 10)
        b = chain[4]
        chain[4] = make_block(b.index, b.prev_hash, b.timestamp + 100, b.txs)
        assert verify_chain(chain) == 5

    def test_raw_log_intact(self, cluster):
        text = serialize_chain(grow(cluster, 6))
        assert verify_chain(text) is None and verify_chain(text.encode()) is None

    def test_raw_log_truncated(self, cluster):
        data = serialize_chain(grow(cluster, 6)).encode()
        assert verify_chain(data[:-1]) == 6
        assert verify_chain(data[:-40]) == 6

    def test_raw_log_byte_fuzz_matches_strict_reference(self, cluster):
        data = serialize_chain(grow(cluster, 20)).encode()
        starts = [0] + [i + 1 for i, c in enumerate(data) if c == 10]
        rng = random.Random(1)
        for _ in range(300):
            pos = rng.randrange(len(data))
            new = rng.choice([c for c in range(256) if c != data[pos]])
            mutated = data[:pos] + bytes([new]) + data[pos + 1:]
            block = max(k for k, s in enumerate(starts) if s <= pos)
            bad = verify_chain(mutated)
            assert bad is not None and bad <= block
            assert bad == strict_first_bad(mutated)


def strict_first_bad(data: bytes):
    """Reference: decode, parse every record strictly, then verify the parsed blocks."""
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        return data.count(b"\n", 0, exc.start)
    try:
        chain = parse_chain(text)
    except ChainParseError as exc:
        return exc.line
    return verify_chain(chain)


class TestQueriesAndReplay:
    def test_queries(self, cluster):
        cluster.submit(cluster.meter(1, 0, p=0.3))
        cluster.step(0)
        node = cluster.nodes[0]
        assert node.query_state("reputation", 1) == 1.0
        assert node.query_state("wallet", 2) == 10_000.0
        assert node.query_state("latest_measurement", "D1")["p"] == 0.3
        with pytest.raises(UnknownKey):
            node.query_state("reputation", 42)
        with pytest.raises(UnknownKey):
            node.query_state("weather")

    def test_queries_agree_across_replicas(self, cluster):
        grow(cluster, 3)
        vals = {canonical_json(n.query_state("latest_measurement")) for n in cluster.nodes}
        assert len(vals) == 1

    def test_replay_reproduces_state(self, cluster):
        chain = grow(cluster, 8)
        assert replay_chain(chain).digest() == cluster.state.digest()

    def test_zero_hash_genesis_link(self, cluster):
        assert cluster.genesis.prev_hash == ZERO_HASH and cluster.genesis.index == 0
