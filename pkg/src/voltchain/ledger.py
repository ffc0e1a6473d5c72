"""Permissioned hash-chained ledger replicated across in-process nodes.

Blocks are proposed round-robin, one per simulation step, and every node
re-validates and re-executes each block (order-then-execute). Contract
semantics live in :mod:`voltchain.contract`; this module only knows how to
order, sign, hash, chain and replay transactions.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

ZERO_HASH = "00" * 32
DEFAULT_BLOCK_MAX = 128
GENESIS_AGENT = 0

PAYLOAD_TYPES = (
    "Genesis",
    "AccountInit",
    "MeterReading",
    "CreateCFP",
    "ReplyCFP",
    "SensitivityPublish",
)


class LedgerError(Exception):
    pass


class TxRejected(LedgerError):
    pass


class BadSignature(TxRejected):
    pass


class UnknownAgent(TxRejected):
    pass


class InvalidPayload(TxRejected):
    pass


class DuplicateAgent(LedgerError):
    pass


class RegistrationClosed(LedgerError):
    pass


class NotProposer(LedgerError):
    pass


class HashMismatch(LedgerError):
    pass


class StaleBlock(HashMismatch):
    pass


class InvalidTx(LedgerError):
    pass


class UnknownKey(LedgerError, KeyError):
    pass


class ChainParseError(LedgerError):
    def __init__(self, line: int, detail: str):
        super().__init__(f"record {line}: {detail}")  # 0-based, equals the block index
        self.line = line


# -- canonical serialization ----------------------------------------------

_SCALARS = (str, int, bool, type(None))


class FrozenRecord(Mapping):
    """Read-only mapping shared between state copies and hashed once.

    Large immutable blobs (the published sensitivity matrix) would otherwise
    be deep-copied and re-serialized on every block.
    """

    __slots__ = ("_data", "_digest")

    def __init__(self, data: Mapping[str, Any]):
        self._data = dict(data)
        self._digest = sha256_hex(canonical_json(self._data).encode())

    def __getitem__(self, key):
        return self._data[key]

    def __iter__(self):
        return iter(self._data)

    def __len__(self):
        return len(self._data)

    def __deepcopy__(self, memo):
        return self

    @property
    def digest(self) -> str:
        return self._digest


def _finite(x: float) -> float:
    if not math.isfinite(x):
        raise ValueError("non-finite float in canonical data")
    return x


def _plain_dict(obj: Mapping) -> dict:
    return {k if type(k) is str else str(k): to_jsonable(v) for k, v in obj.items()}


def _plain_list(obj) -> list:
    return [to_jsonable(v) for v in obj]


# exact-type dispatch for the common cases; everything else takes the slow path
_FAST = {str: None, int: None, bool: None, type(None): None,
         float: _finite, dict: _plain_dict, list: _plain_list, tuple: _plain_list}


def to_jsonable(obj: Any) -> Any:
    t = type(obj)
    if t in _FAST:
        conv = _FAST[t]
        return obj if conv is None else conv(obj)
    if isinstance(obj, _SCALARS):
        return obj
    if isinstance(obj, float):
        return _finite(obj)
    if isinstance(obj, FrozenRecord):
        return {"sha256": obj.digest}
    if isinstance(obj, dict):
        return _plain_dict(obj)
    if isinstance(obj, (list, tuple)):
        return _plain_list(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Mapping):
        return _plain_dict(obj)
    if hasattr(obj, "item"):  # numpy scalar
        return to_jsonable(obj.item())
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"),
                      allow_nan=False, ensure_ascii=True)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# -- signatures --------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    public_key: str
    secret_key: str


class Signer(Protocol):
    def keypair(self, seed: bytes) -> KeyPair: ...
    def sign(self, secret_key: str, msg: bytes) -> str: ...
    def verify(self, public_key: str, msg: bytes, signature: str) -> bool: ...


class Ed25519Signer:
    """Deterministic Ed25519; keys are derived from a seed so runs replay exactly."""

    def keypair(self, seed: bytes) -> KeyPair:
        sk = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
        pub = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        raw = sk.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
        return KeyPair(pub.hex(), raw.hex())

    def sign(self, secret_key: str, msg: bytes) -> str:
        return Ed25519PrivateKey.from_private_bytes(bytes.fromhex(secret_key)).sign(msg).hex()

    def verify(self, public_key: str, msg: bytes, signature: str) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(bytes.fromhex(public_key)).verify(
                bytes.fromhex(signature), msg)
        except (InvalidSignature, ValueError):
            return False
        return True


DEFAULT_SIGNER = Ed25519Signer()


# -- transactions and blocks --------------------------------------------------

@dataclass(frozen=True)
class TransactionEnvelope:
    tx_id: str
    agent_id: int
    payload: Mapping[str, Any]
    signature: str
    submitted_step: int

    @property
    def kind(self) -> str:
        return self.payload["type"]

    def signing_bytes(self) -> bytes:
        return canonical_json({"tx_id": self.tx_id, "agent_id": self.agent_id,
                               "payload": self.payload,
                               "submitted_step": self.submitted_step}).encode()

    def sort_key(self) -> tuple[int, str]:
        return (self.agent_id, self.tx_id)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TransactionEnvelope":
        if set(d) != {"tx_id", "agent_id", "payload", "signature", "submitted_step"}:
            raise ValueError(f"bad transaction fields {sorted(d)}")
        return cls(d["tx_id"], d["agent_id"], d["payload"], d["signature"], d["submitted_step"])


def tx_id_for(agent_id: int, nonce: int) -> str:
    return f"{agent_id}:{nonce:08d}"


def tx_nonce(tx_id: str) -> int:
    return int(tx_id.rsplit(":", 1)[1])


def make_transaction(agent_id: int, nonce: int, payload: Mapping[str, Any], step: int,
                     keys: KeyPair | None, signer: Signer = DEFAULT_SIGNER) -> TransactionEnvelope:
    if payload.get("type") not in PAYLOAD_TYPES:
        raise InvalidPayload(f"unknown payload type {payload.get('type')!r}")
    unsigned = TransactionEnvelope(tx_id_for(agent_id, nonce), agent_id, dict(payload), "", step)
    if keys is None:
        return unsigned
    sig = signer.sign(keys.secret_key, unsigned.signing_bytes())
    return dataclasses.replace(unsigned, signature=sig)


@dataclass(frozen=True)
class Block:
    index: int
    prev_hash: str
    timestamp: int
    txs: tuple[TransactionEnvelope, ...]
    block_hash: str

    def header_bytes(self) -> bytes:
        return canonical_json({"index": self.index, "prev_hash": self.prev_hash,
                               "timestamp": self.timestamp, "txs": self.txs}).encode()

    def compute_hash(self, hasher: Callable[[bytes], str] = sha256_hex) -> str:
        return hasher(self.header_bytes())

    def to_line(self) -> str:
        return canonical_json(self)

    @classmethod
    def from_line(cls, line: str) -> "Block":
        """Strict parse: the line must already be in canonical form."""
        d = json.loads(line)
        if not isinstance(d, dict) or set(d) != {"index", "prev_hash", "timestamp", "txs",
                                                 "block_hash"}:
            raise ValueError("bad block fields")
        # json.loads output is already plain data, so it can be encoded directly
        if json.dumps(d, sort_keys=True, separators=(",", ":"), allow_nan=False,
                      ensure_ascii=True) != line:
            raise ValueError("block is not canonically serialized")
        return cls(d["index"], d["prev_hash"], d["timestamp"],
                   tuple(TransactionEnvelope.from_dict(t) for t in d["txs"]), d["block_hash"])


def make_block(index: int, prev_hash: str, timestamp: int,
               txs: Iterable[TransactionEnvelope],
               hasher: Callable[[bytes], str] = sha256_hex) -> Block:
    b = Block(index, prev_hash, timestamp, tuple(txs), "")
    return dataclasses.replace(b, block_hash=b.compute_hash(hasher))


def serialize_chain(chain: Iterable[Block]) -> str:
    return "".join(b.to_line() + "\n" for b in chain)


def parse_chain(text: str) -> list[Block]:
    if text and not text.endswith("\n"):
        raise ChainParseError(text.count("\n"), "truncated record (no trailing newline)")
    blocks = []
    for i, line in enumerate(text.splitlines()):
        try:
            blocks.append(Block.from_line(line))
        except (ValueError, TypeError, KeyError, AttributeError) as exc:
            raise ChainParseError(i, str(exc)) from None
    return blocks


# every sealed line starts with these members, in this order, because keys are sorted
_RECORD_HEAD = re.compile(rb'\{"block_hash":"([0-9a-f]{64})","index":(0|[1-9][0-9]*),'
                          rb'"prev_hash":"([0-9a-f]{64})","timestamp":')
_HASH_MEMBER_LEN = len('{"block_hash":"",') + 64


def verify_chain(chain: list[Block] | bytes | str,
                 hasher: Callable[[bytes], str] = sha256_hex) -> int | None:
    """Index of the first block whose hash or link fails, or None when intact.

    Accepts parsed blocks or the raw chain.log contents. Raw logs are checked
    record by record without decoding the transactions: a sealed line is
    canonical, so its hash preimage is the line minus the leading
    ``block_hash`` member, and any altered byte breaks either that hash or the
    record structure. A missing final newline marks the last record as bad.
    """
    if isinstance(chain, (bytes, bytearray, str)):
        return _verify_log(chain.encode("utf-8") if isinstance(chain, str) else bytes(chain), hasher)
    prev = ZERO_HASH
    for k, block in enumerate(chain):
        if block.index != k or block.prev_hash != prev:
            return k
        try:
            ok = block.compute_hash(hasher) == block.block_hash
        except (TypeError, ValueError):
            ok = False
        if not ok:
            return k
        prev = block.block_hash
    return None


def _verify_log(data: bytes, hasher: Callable[[bytes], str]) -> int | None:
    lines = data.split(b"\n")
    tail = lines.pop()  # empty when the log ends with a newline
    prev = ZERO_HASH
    for k, raw in enumerate(lines):
        m = _RECORD_HEAD.match(raw)
        if m is None or not raw.isascii() or int(m.group(2)) != k or m.group(3).decode() != prev:
            return k
        block_hash = m.group(1).decode()
        if hasher(b"{" + raw[_HASH_MEMBER_LEN:]) != block_hash:
            return k
        prev = block_hash
    return len(lines) if tail else None


# -- replicated state ----------------------------------------------------------

@dataclass
class Account:
    public_key: str
    balance: float = 0.0
    reputation: float = 1.0
    initialized: bool = False
    device: str | None = None
    device_bus: int | None = None


@dataclass
class WorldState:
    step: int = -1
    params: dict[str, Any] = field(default_factory=dict)
    accounts: dict[int, Account] = field(default_factory=dict)
    nonces: dict[int, int] = field(default_factory=dict)
    bus_readings: dict[int, dict] = field(default_factory=dict)
    device_readings: dict[str, dict] = field(default_factory=dict)
    sensitivity: Mapping | None = None
    cfps: dict[int, Any] = field(default_factory=dict)
    bids: dict[int, list] = field(default_factory=dict)
    contracts: dict[int, Any] = field(default_factory=dict)
    next_cfp_id: int = 1
    events: list[dict] = field(default_factory=list)

    def digest(self) -> str:
        return sha256_hex(canonical_json(self).encode())

    def register_agent(self, agent_id: int, public_key: str, **extra) -> Account:
        if agent_id in self.accounts:
            raise DuplicateAgent(f"agent {agent_id} already registered")
        acct = Account(public_key, **extra)
        self.accounts[agent_id] = acct
        return acct


class Executor(Protocol):
    def validate(self, state: WorldState, tx: TransactionEnvelope) -> None: ...
    def execute(self, state: WorldState, tx: TransactionEnvelope) -> None: ...
    def end_of_block(self, state: WorldState, step: int) -> None: ...


def _default_executor() -> Executor:
    from voltchain import contract
    return contract


QUERY_KEYS = ("account", "reputation", "wallet", "contract", "cfp", "latest_measurement",
              "sensitivity")


class LedgerNode:
    def __init__(self, node_id: str, index: int = 0, n_nodes: int = 1,
                 block_max: int = DEFAULT_BLOCK_MAX, signer: Signer = DEFAULT_SIGNER,
                 hasher: Callable[[bytes], str] = sha256_hex,
                 executor: Executor | None = None, tx_ttl: int = 3):
        self.node_id = node_id
        self.index = index
        self.n_nodes = n_nodes
        self.block_max = block_max
        self.signer = signer
        self.hasher = hasher
        self.executor = executor or _default_executor()
        self.tx_ttl = tx_ttl
        self.chain: list[Block] = []
        self.state = WorldState()
        self.mempool: dict[str, TransactionEnvelope] = {}
        self.dropped: list[tuple[str, str]] = []
        self._verified: set[tuple[str, str, bytes]] = set()

    @property
    def tip_hash(self) -> str:
        return self.chain[-1].block_hash if self.chain else ZERO_HASH

    def register_agent(self, agent_id: int, public_key: str, **extra) -> Account:
        """Permissioned join; only allowed while building the genesis state."""
        if self.chain:
            raise RegistrationClosed("membership is fixed at genesis")
        return self.state.register_agent(agent_id, public_key, **extra)

    # -- admission ---------------------------------------------------------
    def check_signature(self, state: WorldState, tx: TransactionEnvelope) -> None:
        if tx.kind == "Genesis":
            if state.accounts or tx.agent_id != GENESIS_AGENT:
                raise InvalidPayload("genesis payload only valid in block 0")
            return
        acct = state.accounts.get(tx.agent_id)
        if acct is None:
            raise UnknownAgent(f"agent {tx.agent_id} is not registered")
        msg = tx.signing_bytes()
        key = (acct.public_key, tx.signature, msg)
        if key not in self._verified:
            if not self.signer.verify(acct.public_key, msg, tx.signature):
                raise BadSignature(f"tx {tx.tx_id} signature does not verify for agent {tx.agent_id}")
            self._verified.add(key)
        if tx_nonce(tx.tx_id) <= state.nonces.get(tx.agent_id, -1):
            raise InvalidPayload(f"tx {tx.tx_id} replays a used nonce")

    def submit_transaction(self, tx: TransactionEnvelope) -> TransactionEnvelope:
        if tx.payload.get("type") not in PAYLOAD_TYPES or tx.kind == "Genesis":
            raise InvalidPayload(f"payload type {tx.payload.get('type')!r} not submittable")
        self.check_signature(self.state, tx)
        try:
            self.executor.validate(self.state, tx)
        except TxRejected:
            raise
        except Exception as exc:  # contract rule violations
            raise InvalidPayload(str(exc)) from exc
        self.mempool[tx.tx_id] = tx
        return tx

    # -- block production --------------------------------------------------
    def is_proposer(self, step: int) -> bool:
        return step % self.n_nodes == self.index

    def _run(self, state: WorldState, tx: TransactionEnvelope) -> None:
        self.check_signature(state, tx)
        self.executor.execute(state, tx)
        if tx.kind != "Genesis":
            state.nonces[tx.agent_id] = tx_nonce(tx.tx_id)

    def seal_block(self, step: int) -> Block:
        if not self.is_proposer(step):
            raise NotProposer(f"node {self.index} is not proposer for step {step}")
        work = copy.deepcopy(self.state)
        work.step = step
        included: list[TransactionEnvelope] = []
        for tx in sorted(self.mempool.values(), key=TransactionEnvelope.sort_key):
            if len(included) >= self.block_max:
                break
            trial = copy.deepcopy(work) if _mutates_much(tx) else None
            try:
                self._run(work, tx)
            except Exception as exc:
                if trial is not None:
                    work = trial
                self.dropped.append((tx.tx_id, str(exc)))
                del self.mempool[tx.tx_id]
                continue
            included.append(tx)
        self.executor.end_of_block(work, step)
        block = make_block(len(self.chain), self.tip_hash, step, included, self.hasher)
        self._commit(block, work)
        return block

    def apply_block(self, block: Block) -> WorldState:
        if block.index != len(self.chain):
            raise StaleBlock(f"block {block.index} does not extend chain of length {len(self.chain)}")
        if block.prev_hash != self.tip_hash:
            raise HashMismatch(f"block {block.index} prev_hash does not match tip")
        if block.compute_hash(self.hasher) != block.block_hash:
            raise HashMismatch(f"block {block.index} hash does not recompute")
        if len(block.txs) > self.block_max:
            raise InvalidTx(f"block {block.index} exceeds {self.block_max} txs")
        if list(block.txs) != sorted(block.txs, key=TransactionEnvelope.sort_key):
            raise InvalidTx(f"block {block.index} txs not in canonical order")
        work = copy.deepcopy(self.state)
        work.step = block.timestamp
        for tx in block.txs:
            if tx.kind == "Genesis" and block.index != 0:
                raise InvalidTx("genesis payload outside block 0")
            try:
                self._run(work, tx)
            except Exception as exc:
                raise InvalidTx(f"block {block.index} tx {tx.tx_id}: {exc}") from exc
        self.executor.end_of_block(work, block.timestamp)
        self._commit(block, work)
        return work

    def _commit(self, block: Block, state: WorldState) -> None:
        self.chain.append(block)
        self.state = state
        for tx in block.txs:
            self.mempool.pop(tx.tx_id, None)
        horizon = block.timestamp - self.tx_ttl
        for tx_id in [t for t, tx in self.mempool.items() if tx.submitted_step < horizon]:
            del self.mempool[tx_id]

    # -- reads -------------------------------------------------------------
    def query_state(self, key: str, arg: Any = None) -> Any:
        s = self.state
        if key not in QUERY_KEYS:
            raise UnknownKey(key)
        if key in ("account", "reputation", "wallet"):
            if arg not in s.accounts:
                raise UnknownKey(f"{key}:{arg}")
            acct = s.accounts[arg]
            if key == "reputation":
                return acct.reputation
            if key == "wallet":
                return acct.balance
            return copy.deepcopy(acct)
        if key in ("contract", "cfp"):
            table = s.contracts if key == "contract" else s.cfps
            if arg not in table:
                raise UnknownKey(f"{key}:{arg}")
            return copy.deepcopy(table[arg])
        if key == "latest_measurement":
            if arg is None:
                return copy.deepcopy({"bus": s.bus_readings, "device": s.device_readings})
            table = s.device_readings if isinstance(arg, str) else s.bus_readings
            if arg not in table:
                raise UnknownKey(f"{key}:{arg}")
            return dict(table[arg])
        if s.sensitivity is None:
            raise UnknownKey("sensitivity not published")
        return s.sensitivity


def _mutates_much(tx: TransactionEnvelope) -> bool:
    # meter readings either apply fully or raise before touching state
    return tx.kind != "MeterReading"


def replay_chain(chain: Iterable[Block], executor: Executor | None = None,
                 signer: Signer = DEFAULT_SIGNER,
                 on_block: Callable[[Block, WorldState], None] | None = None) -> WorldState:
    """Rebuild world state from genesis by re-executing every block."""
    node = LedgerNode("replay", signer=signer, executor=executor, block_max=10**9)
    for block in chain:
        node.apply_block(block)
        if on_block is not None:
            on_block(block, node.state)
    return node.state
