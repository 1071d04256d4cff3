"""
Independent auditing of one tenant chain against the public anchor.

The auditor holds read-only handles on its tenant chain and on the public
chain. For an anchoring round it checks that

* the tree of roots stored on the tenant chain for that round hashes to the
  root published on the public chain (root check);
* the tenant's leaf in that tree matches the state root obtained by replaying
  the tenant chain up to the referenced block (leaf check);
* an inclusion proof of the leaf verifies against the published root
  (proof check).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .anchor import read_committed_anchor
from .chain import TRIE_KEY, Block, ReadOnlyChain, StoreTrie, execute
from .merkle import (
    Digest,
    IncrementalRoot,
    LeafRecord,
    MalformedEncoding,
    MerkleMap,
    deserialize_map,
    verify_proof,
)


class AuditError(Exception):
    pass


class NoAnchorYet(AuditError):
    pass


class Check(enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"
    LEAF_ABSENT = "leaf_absent"
    TRIE_UNREADABLE = "trie_unreadable"
    VALID = "valid"
    INVALID = "invalid"


@dataclass(frozen=True)
class Comparison:
    check: Check
    expected: bytes | None = None
    found: bytes | None = None

    def to_dict(self) -> dict:
        return {
            "check": self.check.value,
            "expected": self.expected.hex() if self.expected is not None else None,
            "found": self.found.hex() if self.found is not None else None,
        }


@dataclass(frozen=True)
class AuditReport:
    tenant: Digest
    anchor_round: int
    leaf_check: Comparison
    root_check: Comparison
    proof_check: Check
    notes: tuple[str, ...] = field(default=())

    @property
    def passed(self) -> bool:
        return (
            self.leaf_check.check is Check.MATCH
            and self.root_check.check is Check.MATCH
            and self.proof_check is Check.VALID
        )

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    @property
    def reason(self) -> str | None:
        if self.passed:
            return None
        bad = []
        if self.root_check.check is not Check.MATCH:
            bad.append(f"root:{self.root_check.check.value}")
        if self.leaf_check.check is not Check.MATCH:
            bad.append(f"leaf:{self.leaf_check.check.value}")
        if self.proof_check is not Check.VALID:
            bad.append("proof:invalid")
        return ",".join(bad + list(self.notes))

    def to_dict(self) -> dict:
        return {
            "tenant": self.tenant.hex(),
            "anchor_round": self.anchor_round,
            "leaf_check": self.leaf_check.to_dict(),
            "root_check": self.root_check.to_dict(),
            "proof_check": self.proof_check.value,
            "verdict": self.verdict,
            "reason": self.reason,
        }

    def summary(self) -> str:
        line = f"tenant {self.tenant.hex()[:12]} round {self.anchor_round}: {self.verdict.upper()}"
        return line if self.passed else f"{line} ({self.reason})"


class _Replayer:
    """Replays a tenant chain from genesis, keeping state between calls.

    The cache is only extended when the block it stopped at still has the
    same hash; any rewrite below that point forces a full replay.
    """

    def __init__(self) -> None:
        self._reset()

    def _reset(self) -> None:
        self._height = 0
        self._hash: Digest | None = None
        self._state: dict[bytes, bytes] = {}
        self._acc = IncrementalRoot()

    def state_root(self, chain: ReadOnlyChain, height: int) -> Digest:
        if (
            self._hash is None
            or height < self._height
            or chain.get_block(self._height).header.hash != self._hash
        ):
            self._reset()
        for block in chain.blocks(self._height + 1, height + 1):
            self._apply(block)
        self._height = height
        self._hash = chain.get_block(height).header.hash
        return self._acc.root

    def _apply(self, block: Block) -> None:
        writes: dict[bytes, bytes] = {}
        state = self._state

        def get(k: bytes) -> bytes | None:
            return writes[k] if k in writes else state.get(k)

        for tx in block.transactions:
            w, err = execute(tx, get, block.header.height, block.header.timestamp)
            if err is None:
                writes.update(w)
        state.update(writes)
        if writes:
            self._acc.apply(writes)


def find_stored_tree_height(tenant: ReadOnlyChain, round_id: int) -> int | None:
    """Height of the newest tenant block that stored the tree for ``round_id``."""
    for h in range(tenant.height, 0, -1):
        block = tenant.get_block(h)
        for tx, err in zip(block.transactions, block.errors):
            if isinstance(tx.payload, StoreTrie) and tx.payload.round_id == round_id and err is None:
                return h
    return None


class Auditor:
    """Audits one tenant chain; remembers leaves it has already verified."""

    def __init__(self, tenant: ReadOnlyChain, public: ReadOnlyChain, *, grace: float = 600.0):
        self.tenant = tenant
        self.public = public
        self.grace = grace
        self.reports: list[AuditReport] = []
        self._last_round = 0
        self._verified: list[LeafRecord] = []
        self._replayer = _Replayer()

    def audit(self, round_id: int | None = None) -> AuditReport:
        public, tenant = self.public, self.tenant
        record = read_committed_anchor(public, round_id)
        if record is None:
            raise NoAnchorYet("no committed anchor" if round_id is None else f"round {round_id} not committed")
        cid = tenant.chain_id

        tree: MerkleMap | None = None
        stored_at = find_stored_tree_height(tenant, record.round_id)
        if stored_at is not None:
            raw = tenant.read_state(TRIE_KEY, stored_at)
            try:
                tree = deserialize_map(raw) if raw is not None else None
            except MalformedEncoding:
                tree = None
        if tree is None:
            root_check = Comparison(Check.TRIE_UNREADABLE, record.root, None)
        elif tree.root == record.root:
            root_check = Comparison(Check.MATCH, record.root, tree.root)
        else:
            root_check = Comparison(Check.MISMATCH, record.root, tree.root)

        leaf_raw = tree.get(cid) if tree is not None else None
        notes: list[str] = []
        if leaf_raw is None:
            leaf = None
            leaf_check = Comparison(Check.LEAF_ABSENT)
            proof_check = Check.INVALID
        else:
            leaf = LeafRecord.decode(leaf_raw)
            leaf_check = self._check_leaf(leaf)
            history = self._check_history()
            if leaf_check.check is Check.MATCH and history is not None:
                leaf_check = history
                notes.append("history-rewritten")
            proof_check = Check.VALID if verify_proof(tree.prove(cid), record.root) else Check.INVALID

        report = AuditReport(cid, record.round_id, leaf_check, root_check, proof_check, tuple(notes))
        if report.passed and leaf is not None:
            self._verified.append(leaf)
        return report

    def _check_leaf(self, leaf: LeafRecord) -> Comparison:
        if leaf.block_number > self.tenant.height:
            return Comparison(Check.MISMATCH, leaf.block_hash, None)
        header = self.tenant.get_block(leaf.block_number).header
        replayed = self._replayer.state_root(self.tenant, leaf.block_number)
        if replayed != leaf.state_root:
            return Comparison(Check.MISMATCH, leaf.state_root, replayed)
        if header.hash != leaf.block_hash:
            return Comparison(Check.MISMATCH, leaf.block_hash, header.hash)
        if header.state_root != replayed:
            return Comparison(Check.MISMATCH, replayed, header.state_root)
        return Comparison(Check.MATCH, leaf.state_root, replayed)

    def _check_history(self) -> Comparison | None:
        # block hashes chain to their parents, so the newest verified leaf covers all older ones
        if not self._verified:
            return None
        last = self._verified[-1]
        if last.block_number > self.tenant.height:
            return Comparison(Check.MISMATCH, last.block_hash, None)
        found = self.tenant.get_block(last.block_number).header.hash
        if found != last.block_hash:
            return Comparison(Check.MISMATCH, last.block_hash, found)
        return None

    def poll(self, now: float | None = None) -> list[AuditReport]:
        """Audit every newly committed round once; returns the new reports.

        A round is audited once its tree shows up on the tenant chain, or once
        ``grace`` seconds have passed since it was anchored.
        """
        latest = read_committed_anchor(self.public)
        new: list[AuditReport] = []
        if latest is None:
            return new
        for r in range(self._last_round + 1, latest.round_id + 1):
            record = read_committed_anchor(self.public, r)
            if record is None:
                continue
            stored = find_stored_tree_height(self.tenant, r) is not None
            if not stored and (now is None or now - record.anchored_at < self.grace):
                break
            new.append(self.audit(r))
            self._last_round = r
        self.reports.extend(new)
        return new


def audit_tenant(tenant: ReadOnlyChain, public: ReadOnlyChain) -> AuditReport:
    """One-shot audit of ``tenant`` against the latest committed anchor."""
    return Auditor(tenant, public).audit()


def audit_continuously(env, auditor: Auditor, interval: float):
    """Start a simpy process that polls ``auditor`` every ``interval``."""

    def loop():
        while True:
            yield env.timeout(interval)
            auditor.poll(env.now)

    return env.process(loop())
