"""
Simulated permissioned (tenant) and public chains.

A ``Chain`` is a sequential state machine: transactions enter a pending pool,
``produce_block`` selects and executes them, and the resulting state is
committed under a Merkle state root. Consensus is abstracted away: the
authorities take turns producing blocks at the instant the caller asks for
one. Time is whatever the caller passes in (the simulator drives a virtual
clock).

Registry contract layout (keys of the chain state):

    uid/<id>               registration record
    scan/<id>/<u32 seq>    scan event, append-only per id
    trie/latest            serialized tree of roots (tenant chains)
    anchor/latest          latest AnchorRecord (public chain)
    anchor/round/<u64 id>  AnchorRecord by round
"""

from __future__ import annotations

import bisect
import enum
import hashlib
import heapq
import json
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Iterable, Iterator, Union

from .merkle import (
    EMPTY_ROOT,
    Digest,
    IncrementalRoot,
    MalformedEncoding,
    MerkleMap,
    deserialize_map,
)
from .records import AnchorRecord, to_millis

AccountId = bytes
ZERO_HASH = bytes(32)

UID_PREFIX = b"uid/"
SCAN_PREFIX = b"scan/"
TRIE_KEY = b"trie/latest"
ANCHOR_LATEST_KEY = b"anchor/latest"
ANCHOR_ROUND_PREFIX = b"anchor/round/"

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


def account(label: str) -> AccountId:
    """Deterministic 20-byte account id for a human-readable label."""
    return hashlib.sha256(b"account:" + label.encode()).digest()[:20]


def uid_key(uid: bytes) -> bytes:
    return UID_PREFIX + uid


def scan_key(uid: bytes, seq: int) -> bytes:
    return SCAN_PREFIX + uid + b"/" + _U32.pack(seq)


def anchor_round_key(round_id: int) -> bytes:
    return ANCHOR_ROUND_PREFIX + _U64.pack(round_id)


class ChainError(Exception):
    pass


class InvalidConfig(ChainError, ValueError):
    pass


class GasExceedsLimit(ChainError):
    pass


class NonceTooLow(ChainError):
    pass


class UnknownHeight(ChainError, LookupError):
    pass


class UnknownHandle(ChainError, LookupError):
    pass


class NodeUnavailable(ChainError):
    pass


# ---------------------------------------------------------------------------
# payloads


def _blob(b: bytes) -> bytes:
    return _U32.pack(len(b)) + b


@dataclass(frozen=True)
class RegisterUniqueIds:
    ids: tuple[bytes, ...]
    kind = "register"

    def encode(self) -> bytes:
        return b"\x01" + _U32.pack(len(self.ids)) + b"".join(_blob(i) for i in self.ids)


@dataclass(frozen=True)
class RecordScan:
    unique_id: bytes
    scanned_at: float
    meta: bytes = b""
    kind = "scan"

    def encode(self) -> bytes:
        return b"\x02" + _blob(self.unique_id) + _U64.pack(to_millis(self.scanned_at)) + _blob(self.meta)


@dataclass(frozen=True)
class StoreTrie:
    round_id: int
    data: bytes
    kind = "store_trie"

    def encode(self) -> bytes:
        return b"\x03" + _U64.pack(self.round_id) + _blob(self.data)


@dataclass(frozen=True)
class PublicAnchor:
    record: AnchorRecord
    kind = "public_anchor"

    def encode(self) -> bytes:
        return b"\x04" + self.record.encode()


Payload = Union[RegisterUniqueIds, RecordScan, StoreTrie, PublicAnchor]


@dataclass(frozen=True)
class GasTable:
    """Fixed gas cost per payload type."""

    register_batch: int = 1_050_000
    record_scan: int = 100_000
    store_trie: int = 200_000
    public_anchor: int = 100_000

    def cost(self, payload: Payload) -> int:
        return {
            RegisterUniqueIds: self.register_batch,
            RecordScan: self.record_scan,
            StoreTrie: self.store_trie,
            PublicAnchor: self.public_anchor,
        }[type(payload)]


@dataclass(frozen=True)
class Transaction:
    sender: AccountId
    nonce: int
    gas_price: int
    gas_cost: int
    payload: Payload
    submitted_at: float = 0.0

    def encode(self) -> bytes:
        return (
            self.sender
            + _U64.pack(self.nonce)
            + _U64.pack(self.gas_price)
            + _U64.pack(self.gas_cost)
            + _U64.pack(to_millis(self.submitted_at))
            + self.payload.encode()
        )

    @cached_property
    def hash(self) -> Digest:
        return hashlib.sha256(self.encode()).digest()


@dataclass(frozen=True)
class BlockHeader:
    height: int
    parent_hash: Digest
    timestamp: float
    state_root: Digest
    tx_root: Digest
    producer: AccountId
    extra: bytes = b""

    def encode(self) -> bytes:
        return (
            _U64.pack(self.height)
            + self.parent_hash
            + _U64.pack(to_millis(self.timestamp))
            + self.state_root
            + self.tx_root
            + self.producer
            + _blob(self.extra)
        )

    @cached_property
    def hash(self) -> Digest:
        return hashlib.sha256(self.encode()).digest()


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple[Transaction, ...] = ()
    errors: tuple[str | None, ...] = ()

    @property
    def height(self) -> int:
        return self.header.height

    @property
    def gas_used(self) -> int:
        return sum(tx.gas_cost for tx in self.transactions)

    def to_dict(self) -> dict:
        h = self.header
        return {
            "height": h.height,
            "hash": h.hash.hex(),
            "parent_hash": h.parent_hash.hex(),
            "timestamp": h.timestamp,
            "state_root": h.state_root.hex(),
            "tx_root": h.tx_root.hex(),
            "producer": h.producer.hex(),
            "gas_used": self.gas_used,
            "transactions": [
                {
                    "hash": tx.hash.hex(),
                    "sender": tx.sender.hex(),
                    "nonce": tx.nonce,
                    "gas_price": tx.gas_price,
                    "gas_cost": tx.gas_cost,
                    "kind": tx.payload.kind,
                    "submitted_at": tx.submitted_at,
                    "error": err,
                }
                for tx, err in zip(self.transactions, self.errors)
            ],
        }


def tx_root(transactions: Iterable[Transaction]) -> Digest:
    return MerkleMap({_U32.pack(i): tx.encode() for i, tx in enumerate(transactions)}).root


class TxState(enum.Enum):
    PENDING = "pending"
    INCLUDED = "included"
    COMMITTED = "committed"
    FAILED = "failed"


@dataclass(frozen=True)
class TxStatus:
    state: TxState
    height: int | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {"state": self.state.value, "height": self.height, "error": self.error}


@dataclass(frozen=True)
class TxHandle:
    chain_id: Digest
    tx_hash: Digest

    def to_dict(self) -> dict:
        return {"chain_id": self.chain_id.hex(), "tx_hash": self.tx_hash.hex()}


class NodeMode(enum.Enum):
    UNREACHABLE = "unreachable"
    RESTORED = "restored"


@dataclass(frozen=True)
class ChainConfig:
    seed: str
    inter_block_time: float = 5.0
    gas_limit: int = 80_000_000
    authorities: tuple[AccountId, ...] = ()
    confirmations_required: int = 1
    genesis_timestamp: float = 0.0
    gas_costs: GasTable = field(default_factory=GasTable)
    produce_empty_blocks: bool = False

    @classmethod
    def with_authorities(cls, seed: str, n: int = 3, **kwargs) -> ChainConfig:
        auths = tuple(account(f"{seed}/authority/{i}") for i in range(n))
        return cls(seed=seed, authorities=auths, **kwargs)


# ---------------------------------------------------------------------------
# contract logic


StateGetter = Callable[[bytes], Union[bytes, None]]


def execute(tx: Transaction, get: StateGetter, height: int, timestamp: float) -> tuple[dict[bytes, bytes], str | None]:
    """Apply one transaction's payload against ``get``.

    Returns the writes and an error string; a failed transaction writes nothing
    but still consumes its nonce and gas.
    """
    p = tx.payload
    if isinstance(p, RegisterUniqueIds):
        if not p.ids:
            return {}, "empty-batch"
        if len(set(p.ids)) != len(p.ids):
            return {}, "duplicate-id"
        keys = [uid_key(i) for i in p.ids]
        if any(get(k) is not None for k in keys):
            return {}, "duplicate-id"
        record = tx.sender + _U64.pack(to_millis(timestamp)) + tx.hash
        return dict.fromkeys(keys, record), None
    if isinstance(p, RecordScan):
        if get(uid_key(p.unique_id)) is None:
            return {}, "unknown-unique-id"
        seq = 0
        while get(scan_key(p.unique_id, seq)) is not None:
            seq += 1
        value = tx.sender + _U64.pack(to_millis(p.scanned_at)) + p.meta
        return {scan_key(p.unique_id, seq): value}, None
    if isinstance(p, StoreTrie):
        try:
            deserialize_map(p.data)
        except MalformedEncoding:
            return {}, "malformed-trie"
        return {TRIE_KEY: p.data}, None
    if isinstance(p, PublicAnchor):
        data = p.record.encode()
        return {ANCHOR_LATEST_KEY: data, anchor_round_key(p.record.round_id): data}, None
    return {}, "unknown-payload"


def replay_state(blocks: Iterable[Block], height: int) -> dict[bytes, bytes]:
    """Re-execute blocks 1..height from an empty state; returns the final state."""
    state: dict[bytes, bytes] = {}
    for block in blocks:
        h = block.header.height
        if h == 0:
            continue
        if h > height:
            break
        writes: dict[bytes, bytes] = {}

        def get(k: bytes) -> bytes | None:
            return writes[k] if k in writes else state.get(k)

        for tx in block.transactions:
            w, err = execute(tx, get, h, block.header.timestamp)
            if err is None:
                writes.update(w)
        state.update(writes)
    return state


# ---------------------------------------------------------------------------


class Chain:
    """One simulated chain (tenant or public)."""

    def __init__(self, config: ChainConfig):
        if not config.authorities:
            raise InvalidConfig("at least one authority is required")
        if config.gas_limit <= 0:
            raise InvalidConfig("gas_limit must be positive")
        if config.inter_block_time <= 0:
            raise InvalidConfig("inter_block_time must be positive")
        if config.confirmations_required < 1:
            raise InvalidConfig("confirmations_required must be >= 1")
        self.config = config
        self._reachable = True
        self._pool: dict[AccountId, dict[int, Transaction]] = {}
        self._pool_size = 0
        self._pending: set[Digest] = set()
        self._reset_state()
        genesis = BlockHeader(
            height=0,
            parent_hash=ZERO_HASH,
            timestamp=config.genesis_timestamp,
            state_root=EMPTY_ROOT,
            tx_root=EMPTY_ROOT,
            producer=config.authorities[0],
            extra=config.seed.encode(),
        )
        self._blocks: list[Block] = [Block(genesis)]
        self.chain_id: Digest = genesis.hash

    def _reset_state(self) -> None:
        self._state: dict[bytes, bytes] = {}
        self._since: dict[bytes, int] = {}
        self._older: dict[bytes, list[tuple[int, bytes]]] = {}
        self._acc = IncrementalRoot()
        self._nonces: dict[AccountId, int] = {}
        self._included: dict[Digest, tuple[int, str | None]] = {}

    def __repr__(self) -> str:
        return f"Chain({self.config.seed!r}, height={self.height}, pending={self._pool_size})"

    # -- reachability -----------------------------------------------------

    @property
    def reachable(self) -> bool:
        return self._reachable

    def fail_over(self, mode: NodeMode) -> None:
        self._reachable = mode is NodeMode.RESTORED

    def _check_reachable(self) -> None:
        if not self._reachable:
            raise NodeUnavailable(self.config.seed)

    # -- writes -------------------------------------------------------------

    def submit(self, tx: Transaction) -> TxHandle:
        self._check_reachable()
        if tx.gas_cost > self.config.gas_limit:
            raise GasExceedsLimit(f"gas {tx.gas_cost} > limit {self.config.gas_limit}")
        if tx.gas_cost <= 0 or tx.gas_price <= 0:
            raise ValueError("gas_cost and gas_price must be positive")
        if tx.nonce < self._nonces.get(tx.sender, 0):
            raise NonceTooLow(f"nonce {tx.nonce} already used")
        queue = self._pool.setdefault(tx.sender, {})
        if tx.nonce in queue:
            raise NonceTooLow(f"nonce {tx.nonce} already pending")
        queue[tx.nonce] = tx
        self._pool_size += 1
        self._pending.add(tx.hash)
        return TxHandle(self.chain_id, tx.hash)

    def account_nonce(self, sender: AccountId) -> int:
        """Next nonce expected from ``sender`` by the executed state."""
        return self._nonces.get(sender, 0)

    @property
    def pending_count(self) -> int:
        return self._pool_size

    def _select(self) -> list[Transaction]:
        # heads of each sender's consecutive-nonce run, best fee first
        heap = []
        for sender, queue in self._pool.items():
            n = self._nonces.get(sender, 0)
            tx = queue.get(n)
            if tx is not None:
                heap.append((-tx.gas_price, tx.submitted_at, sender, n))
        heapq.heapify(heap)
        gas_left = self.config.gas_limit
        chosen = []
        while heap:
            _, _, sender, n = heapq.heappop(heap)
            tx = self._pool[sender][n]
            if tx.gas_cost > gas_left:
                break  # strict fee order: nothing jumps past a transaction that does not fit
            chosen.append(tx)
            gas_left -= tx.gas_cost
            nxt = self._pool[sender].get(n + 1)
            if nxt is not None:
                heapq.heappush(heap, (-nxt.gas_price, nxt.submitted_at, sender, n + 1))
        return chosen

    def produce_block(self, now: float) -> Block | None:
        last = self._blocks[-1].header
        if now + 1e-9 < last.timestamp + self.config.inter_block_time:
            raise ValueError(f"block at {now} too early; last block at {last.timestamp}")
        if not self._pool_size and not self.config.produce_empty_blocks:
            return None
        txs = self._select()
        if not txs and not self.config.produce_empty_blocks:
            return None
        for tx in txs:
            queue = self._pool[tx.sender]
            del queue[tx.nonce]
            if not queue:
                del self._pool[tx.sender]
            self._pending.discard(tx.hash)
        self._pool_size -= len(txs)
        return self._seal(txs, now)

    def _seal(self, txs: list[Transaction], now: float) -> Block:
        height = len(self._blocks)
        writes: dict[bytes, bytes] = {}
        state = self._state

        def get(k: bytes) -> bytes | None:
            return writes[k] if k in writes else state.get(k)

        errors = []
        for tx in txs:
            self._nonces[tx.sender] = tx.nonce + 1
            w, err = execute(tx, get, height, now)
            if err is None:
                writes.update(w)
            errors.append(err)
            self._included[tx.hash] = (height, err)
        for k, v in writes.items():
            old_since = self._since.get(k)
            if old_since is not None:
                self._older.setdefault(k, []).append((old_since, state[k]))
            state[k] = v
            self._since[k] = height
        state_root = self._acc.apply(writes) if writes else self._acc.root
        authorities = self.config.authorities
        header = BlockHeader(
            height=height,
            parent_hash=self._blocks[-1].header.hash,
            timestamp=now,
            state_root=state_root,
            tx_root=tx_root(txs),
            producer=authorities[height % len(authorities)],
        )
        block = Block(header, tuple(txs), tuple(errors))
        self._blocks.append(block)
        return block

    # -- reads --------------------------------------------------------------

    @property
    def height(self) -> int:
        return len(self._blocks) - 1

    @property
    def committed_height(self) -> int:
        return max(0, self.height - self.config.confirmations_required + 1)

    def latest_block(self) -> BlockHeader:
        self._check_reachable()
        return self._blocks[-1].header

    def get_block(self, height: int) -> Block:
        self._check_reachable()
        if not 0 <= height < len(self._blocks):
            raise UnknownHeight(height)
        return self._blocks[height]

    def blocks(self, start: int = 0, stop: int | None = None) -> Iterator[Block]:
        self._check_reachable()
        return iter(self._blocks[start:stop])

    def read_state(self, key: bytes, height: int | None = None) -> bytes | None:
        self._check_reachable()
        if height is None:
            return self._state.get(key)
        if not 0 <= height <= self.height:
            raise UnknownHeight(height)
        since = self._since.get(key)
        if since is None:
            return None
        if since <= height:
            return self._state[key]
        older = self._older.get(key, [])
        i = bisect.bisect_right(older, height, key=lambda e: e[0])
        return older[i - 1][1] if i else None

    def state_snapshot(self, height: int | None = None) -> MerkleMap:
        """Full state as a ``MerkleMap`` (latest, or pinned to ``height``)."""
        if height is None or height == self.height:
            return MerkleMap(self._state)
        return MerkleMap({k: v for k in self._since if (v := self.read_state(k, height)) is not None})

    def commit_status(self, handle: TxHandle) -> TxStatus:
        if handle.chain_id != self.chain_id:
            raise UnknownHandle("handle belongs to another chain")
        found = self._included.get(handle.tx_hash)
        if found is None:
            if handle.tx_hash in self._pending:
                return TxStatus(TxState.PENDING)
            raise UnknownHandle(handle.tx_hash.hex())
        h, err = found
        if err is not None:
            return TxStatus(TxState.FAILED, h, err)
        if self.height >= h + self.config.confirmations_required - 1:
            return TxStatus(TxState.COMMITTED, h)
        return TxStatus(TxState.INCLUDED, h)

    # -- history rewriting (fault injection only) -----------------------------

    def rewrite_transaction(self, height: int, index: int, payload: Payload) -> Transaction:
        """Replace one historical transaction's payload and re-seal every block.

        Models a platform owner who rewrites history with full authority power:
        headers, roots and hashes are all recomputed, so the result is
        internally consistent and only comparison with earlier anchors exposes
        it.
        """
        if not 1 <= height <= self.height:
            raise UnknownHeight(height)
        old_blocks = self._blocks
        target = old_blocks[height].transactions[index]
        new_tx = replace(target, payload=payload)
        self._reset_state()
        self._blocks = old_blocks[:1]
        for block in old_blocks[1:]:
            txs = list(block.transactions)
            if block.height == height:
                txs[index] = new_tx
            self._seal(txs, block.header.timestamp)
        return new_tx


def create_chain(config: ChainConfig) -> Chain:
    return Chain(config)


class ReadOnlyChain:
    """Read-only handle on a chain, as held by tenants and auditors."""

    def __init__(self, chain: Chain):
        self._chain = chain

    @property
    def chain_id(self) -> Digest:
        return self._chain.chain_id

    @property
    def config(self) -> ChainConfig:
        return self._chain.config

    @property
    def height(self) -> int:
        self._chain._check_reachable()
        return self._chain.height

    @property
    def committed_height(self) -> int:
        self._chain._check_reachable()
        return self._chain.committed_height

    def latest_block(self) -> BlockHeader:
        return self._chain.latest_block()

    def get_block(self, height: int) -> Block:
        return self._chain.get_block(height)

    def blocks(self, start: int = 0, stop: int | None = None) -> Iterator[Block]:
        return self._chain.blocks(start, stop)

    def read_state(self, key: bytes, height: int | None = None) -> bytes | None:
        return self._chain.read_state(key, height)


def export_trace(chain: Chain, path) -> None:
    """Write every block as one JSON object per line."""
    with open(path, "w") as fh:
        for block in chain.blocks():
            fh.write(json.dumps(block.to_dict(), sort_keys=True) + "\n")
