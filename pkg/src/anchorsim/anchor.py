"""
Anchoring engine.

Every ``anchor_interval`` the scheduler tries to take the round lock. A round

1. reads the latest committed AnchorRecord from the public chain and checks it
   against the engine's own tree of roots;
2. queries every registered tenant chain for its latest header in parallel;
   tenants that do not answer within ``query_timeout`` keep their old leaf;
3. computes the new root of the tree of roots;
4. sends one PublicAnchor transaction to the public chain and one StoreTrie
   transaction (the serialized tree) to every tenant that answered;
5. holds the lock until the public transaction is committed or the deadline
   passes.

Ticks that find the lock taken are recorded as skipped rounds.
"""

from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass, field
from typing import Iterable

import simpy

from .chain import (
    ANCHOR_LATEST_KEY,
    NodeUnavailable,
    PublicAnchor,
    StoreTrie,
    Transaction,
    TxHandle,
    TxState,
    TxStatus,
    account,
    anchor_round_key,
)
from .merkle import EMPTY_ROOT, Digest, LeafRecord, MerkleMap, serialize_map
from .records import AnchorRecord
from .sim import ChainNode

ANCHOR_ACCOUNT = account("platform/anchor")


class AnchorError(Exception):
    pass


class DuplicateTenant(AnchorError):
    pass


class Outcome(enum.Enum):
    SUCCESS = "success"
    SKIPPED = "skipped"
    FAILED = "failed"


class LeafStatus(enum.Enum):
    ADDED = "added"
    UPDATED = "updated"
    UNCHANGED = "unchanged"
    TIMED_OUT = "timed_out"


# failure reasons
STATE_DIVERGED = "StateDiverged"
PUBLIC_COMMIT_TIMEOUT = "PublicCommitTimeout"
NO_TENANTS = "NoTenantsRegistered"
PUBLIC_UNAVAILABLE = "PublicUnavailable"
TENANT_STORE_TIMEOUT = "TenantStoreTimeout"


@dataclass(frozen=True)
class AnchorConfig:
    anchor_interval: float = 600.0
    query_timeout: float = 5.0
    query_latency: float = 0.2
    commit_deadline: float = 600.0
    app_max_gas_price: int = 10
    prioritize: bool = True
    first_tick: float | None = None

    @property
    def anchor_gas_price(self) -> int:
        return self.app_max_gas_price + 1 if self.prioritize else self.app_max_gas_price


@dataclass(frozen=True)
class TenantRegistration:
    chain_id: Digest
    node: ChainNode
    query_timeout: float | None = None


@dataclass(frozen=True)
class TenantResult:
    status: LeafStatus
    leaf: LeafRecord | None = None

    def to_dict(self) -> dict:
        return {"status": self.status.value, "leaf": self.leaf.to_dict() if self.leaf else None}


@dataclass
class RoundReport:
    round_id: int | None
    started: float
    finished: float
    outcome: Outcome
    reason: str | None = None
    per_tenant: dict[Digest, TenantResult] = field(default_factory=dict)
    public_tx: TxStatus | None = None
    tenant_store_txs: dict[Digest, TxStatus] = field(default_factory=dict)
    record: AnchorRecord | None = None
    transactions_sent: int = 0

    @property
    def duration(self) -> float:
        return self.finished - self.started

    def to_dict(self) -> dict:
        return {
            "round_id": self.round_id,
            "started": self.started,
            "finished": self.finished,
            "duration": self.duration,
            "outcome": self.outcome.value,
            "reason": self.reason,
            "per_tenant": {cid.hex(): r.to_dict() for cid, r in self.per_tenant.items()},
            "public_tx": self.public_tx.to_dict() if self.public_tx else None,
            "tenant_store_txs": {cid.hex(): s.to_dict() for cid, s in self.tenant_store_txs.items()},
            "record": self.record.to_dict() if self.record else None,
            "transactions_sent": self.transactions_sent,
        }


def read_committed_anchor(public, round_id: int | None = None) -> AnchorRecord | None:
    """Latest (or a given round's) AnchorRecord at the public chain's committed height."""
    key = ANCHOR_LATEST_KEY if round_id is None else anchor_round_key(round_id)
    raw = public.read_state(key, public.committed_height)
    return AnchorRecord.decode(raw) if raw is not None else None


class AnchorEngine:
    """Maintains the tree of roots and runs anchoring rounds on the sim clock."""

    def __init__(self, env: simpy.Environment, public: ChainNode, config: AnchorConfig | None = None):
        self.env = env
        self.public = public
        self.config = config or AnchorConfig()
        self.account = ANCHOR_ACCOUNT
        self._tenants: dict[Digest, TenantRegistration] = {}
        self._tree = MerkleMap()
        self._latest: AnchorRecord | None = None
        self._history: list[RoundReport] = []
        self._lock = threading.Lock()
        self._nonces: dict[Digest, int] = {}
        self._delivered: dict[Digest, int] = {}
        self._redelivering: set[Digest] = set()
        # roots published by rounds that hit the deadline; adopted if they commit late
        self._late: dict[Digest, tuple[MerkleMap, AnchorRecord]] = {}
        self._active = 0
        self.max_concurrent_rounds = 0
        self.public_root_override: Digest | None = None
        self._scheduler: simpy.Process | None = None

    # -- registration --------------------------------------------------------

    def register_tenant(self, registration: TenantRegistration) -> None:
        if registration.chain_id in self._tenants:
            raise DuplicateTenant(registration.chain_id.hex())
        self._tenants[registration.chain_id] = registration

    def register_node(self, node: ChainNode) -> TenantRegistration:
        reg = TenantRegistration(node.chain_id, node)
        self.register_tenant(reg)
        return reg

    @property
    def tenants(self) -> list[TenantRegistration]:
        return list(self._tenants.values())

    # -- reads ---------------------------------------------------------------

    @property
    def tree(self) -> MerkleMap:
        """Tree of roots as of the last committed anchor."""
        return self._tree

    def latest_anchor(self) -> AnchorRecord | None:
        return self._latest

    def round_history(self) -> list[RoundReport]:
        return sorted(self._history, key=lambda r: r.started)

    @property
    def round_active(self) -> bool:
        return self._lock.locked()

    # -- scheduling ----------------------------------------------------------

    def start(self) -> simpy.Process:
        """Begin ticking every ``anchor_interval`` on the sim clock."""
        if self._scheduler is None:
            self._scheduler = self.env.process(self._ticks())
        return self._scheduler

    def _ticks(self):
        cfg = self.config
        first = cfg.first_tick if cfg.first_tick is not None else cfg.anchor_interval
        k = 0
        while True:
            at = first + k * cfg.anchor_interval
            k += 1
            if at > self.env.now:
                yield self.env.timeout(at - self.env.now)
            self.schedule_tick()

    def schedule_tick(self) -> int | None:
        """Start a round if the lock is free; returns its round id, or None if skipped."""
        now = self.env.now
        if not self._lock.acquire(blocking=False):
            self._history.append(RoundReport(None, now, now, Outcome.SKIPPED, "lock held"))
            return None
        round_id = self._next_round_id()
        self.env.process(self._run_locked(round_id))
        return round_id

    def run_once(self) -> RoundReport:
        """Run one round to completion, advancing the sim clock as needed."""
        if not self._lock.acquire(blocking=False):
            raise AnchorError("a round is already in progress")
        proc = self.env.process(self._run_locked(self._next_round_id()))
        self.env.run(until=proc)
        return proc.value

    def _next_round_id(self) -> int:
        return (self._latest.round_id if self._latest else 0) + 1

    def _run_locked(self, round_id: int):
        self._active += 1
        self.max_concurrent_rounds = max(self.max_concurrent_rounds, self._active)
        try:
            report = yield from self.run_round(round_id)
        finally:
            self._active -= 1
            self._lock.release()
        self._history.append(report)
        return report

    # -- the round -----------------------------------------------------------

    def run_round(self, round_id: int):
        """Round body as a simpy process generator. Caller must hold the lock."""
        env, cfg = self.env, self.config
        started = env.now
        tenants = list(self._tenants.values())

        def finish(outcome: Outcome, reason: str | None = None, **kw) -> RoundReport:
            return RoundReport(round_id, started, env.now, outcome, reason, **kw)

        if not tenants:
            return finish(Outcome.FAILED, NO_TENANTS)

        # (1) the engine must agree with what the public chain already holds
        yield env.timeout(cfg.query_latency)
        try:
            published = read_committed_anchor(self.public.chain)
        except NodeUnavailable:
            return finish(Outcome.FAILED, PUBLIC_UNAVAILABLE)
        published_root = published.root if published else EMPTY_ROOT
        if published_root != self._tree.root:
            late = self._late.pop(published_root, None)
            if late is None or late[1] != published:
                return finish(Outcome.FAILED, STATE_DIVERGED)
            self._tree, self._latest = late
            round_id = published.round_id + 1

        # (2) refresh tenant leaves in parallel
        queries = [
            env.process(reg.node.query_latest(cfg.query_latency, reg.query_timeout or cfg.query_timeout))
            for reg in tenants
        ]
        answers = yield env.all_of(queries)
        per_tenant: dict[Digest, TenantResult] = {}
        updates: dict[bytes, bytes] = {}
        reachable = []
        for reg, q in zip(tenants, queries):
            header = answers[q]
            if header is None:
                per_tenant[reg.chain_id] = TenantResult(LeafStatus.TIMED_OUT, self._leaf(reg.chain_id))
                continue
            reachable.append(reg)
            leaf = LeafRecord(header.state_root, header.height, header.hash)
            old = self._tree.get(reg.chain_id)
            if old is None:
                status = LeafStatus.ADDED
            elif old == leaf.encode():
                status = LeafStatus.UNCHANGED
            else:
                status = LeafStatus.UPDATED
            per_tenant[reg.chain_id] = TenantResult(status, leaf)
            updates[reg.chain_id] = leaf.encode()

        # (3) new root of the tree of roots
        new_tree = self._tree.update(updates)
        root = self.public_root_override if self.public_root_override is not None else new_tree.root
        record = AnchorRecord(root, published_root, round_id, env.now)

        # (4) one public transaction, one StoreTrie per reachable tenant
        try:
            public_handle = self._send(self.public, PublicAnchor(record))
        except NodeUnavailable:
            return finish(Outcome.FAILED, PUBLIC_UNAVAILABLE, per_tenant=per_tenant)
        sent = 1
        blob = serialize_map(new_tree)
        store_handles: dict[Digest, TxHandle] = {}
        for reg in reachable:
            try:
                store_handles[reg.chain_id] = self._send(reg.node, StoreTrie(round_id, blob))
                sent += 1
            except NodeUnavailable:
                pass

        # (5) hold the lock until public commit (or deadline)
        deadline = env.timeout(cfg.commit_deadline)
        committed = self.public.wait_for(public_handle, TxState.COMMITTED)
        yield committed | deadline
        public_status = self.public.status(public_handle)
        store_events = {cid: self._node(cid).wait_for(h, TxState.INCLUDED) for cid, h in store_handles.items()}

        def store_statuses() -> dict[Digest, TxStatus]:
            return {cid: self._node(cid).status(h) for cid, h in store_handles.items()}

        common = dict(per_tenant=per_tenant, record=record, transactions_sent=sent)
        if public_status.state is not TxState.COMMITTED:
            self._late[root] = (new_tree, record)
            return finish(Outcome.FAILED, PUBLIC_COMMIT_TIMEOUT, public_tx=public_status,
                          tenant_store_txs=store_statuses(), **common)

        self._tree, self._latest = new_tree, record
        self._late.clear()
        if store_events and not deadline.processed:
            yield env.all_of(list(store_events.values())) | deadline
        stores = store_statuses()
        for cid, st in stores.items():
            if st.state in (TxState.INCLUDED, TxState.COMMITTED):
                self._delivered[cid] = round_id
        for reg in tenants:
            if reg.chain_id not in store_handles:
                self._schedule_redelivery(reg.chain_id)
        ok = all(st.state in (TxState.INCLUDED, TxState.COMMITTED) for st in stores.values())
        if not ok:
            return finish(Outcome.FAILED, TENANT_STORE_TIMEOUT, public_tx=public_status,
                          tenant_store_txs=stores, **common)
        return finish(Outcome.SUCCESS, public_tx=public_status, tenant_store_txs=stores, **common)

    def _leaf(self, chain_id: Digest) -> LeafRecord | None:
        raw = self._tree.get(chain_id)
        return LeafRecord.decode(raw) if raw is not None else None

    def _node(self, chain_id: Digest) -> ChainNode:
        return self._tenants[chain_id].node

    def _send(self, node: ChainNode, payload) -> TxHandle:
        cid = node.chain_id
        if cid not in self._nonces:
            self._nonces[cid] = node.chain.account_nonce(self.account)
        chain = node.chain
        tx = Transaction(
            sender=self.account,
            nonce=self._nonces[cid],
            gas_price=self.config.anchor_gas_price,
            gas_cost=chain.config.gas_costs.cost(payload),
            payload=payload,
            submitted_at=self.env.now,
        )
        handle = node.submit(tx)
        self._nonces[cid] += 1
        return handle

    # -- catching up tenants that missed a StoreTrie ---------------------------

    def _schedule_redelivery(self, chain_id: Digest) -> None:
        if chain_id not in self._redelivering:
            self._redelivering.add(chain_id)
            self.env.process(self._redeliver(chain_id))

    def _redeliver(self, chain_id: Digest):
        try:
            while True:
                yield self.env.timeout(self.config.query_timeout)
                latest = self._latest
                if latest is None or self._delivered.get(chain_id, 0) >= latest.round_id:
                    return
                if self._lock.locked():
                    continue
                node = self._node(chain_id)
                try:
                    self._send(node, StoreTrie(latest.round_id, serialize_map(self._tree)))
                except NodeUnavailable:
                    continue
                self._delivered[chain_id] = latest.round_id
                return
        finally:
            self._redelivering.discard(chain_id)


def export_rounds(reports: Iterable[RoundReport], path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
