"""
Fault injection for audit soundness tests.

Each helper models a dishonest platform owner. History rewrites re-seal the
tenant chain, so the chain stays internally consistent and only a comparison
against previously anchored data can expose the change.
"""

from __future__ import annotations

from .anchor import AnchorEngine
from .chain import Chain, RegisterUniqueIds, StoreTrie, Transaction
from .merkle import Digest


class NothingToTamper(LookupError):
    pass


def _flip(data: bytes, pos: int, mask: int = 0x01) -> bytes:
    out = bytearray(data)
    out[pos] ^= mask
    return bytes(out)


def tamper_tenant_state(chain: Chain, max_height: int, *, pick: int = 0, byte: int = 0) -> Transaction:
    """Flip one byte of a registered id in a block at or below ``max_height``.

    ``pick`` selects among the eligible registrations (newest first) and
    ``byte`` the position inside the id.
    """
    candidates = []
    for h in range(min(max_height, chain.height), 0, -1):
        block = chain.get_block(h)
        for i, (tx, err) in enumerate(zip(block.transactions, block.errors)):
            if isinstance(tx.payload, RegisterUniqueIds) and err is None:
                candidates.append((h, i, tx))
    if not candidates:
        raise NothingToTamper(f"no registration at or below height {max_height}")
    h, i, tx = candidates[pick % len(candidates)]
    ids = list(tx.payload.ids)
    ids[0] = _flip(ids[0], byte % len(ids[0]))
    return chain.rewrite_transaction(h, i, RegisterUniqueIds(tuple(ids)))


def tamper_stored_tree(chain: Chain, round_id: int, *, offset: int = 1) -> Transaction:
    """Flip a byte of the serialized tree stored for ``round_id``.

    ``offset`` counts from the end of the blob, which lands inside the last
    leaf's value and so keeps the encoding well formed.
    """
    for h in range(chain.height, 0, -1):
        block = chain.get_block(h)
        for i, (tx, err) in enumerate(zip(block.transactions, block.errors)):
            if isinstance(tx.payload, StoreTrie) and tx.payload.round_id == round_id and err is None:
                data = tx.payload.data
                return chain.rewrite_transaction(h, i, StoreTrie(round_id, _flip(data, len(data) - offset)))
    raise NothingToTamper(f"no stored tree for round {round_id}")


def fabricate_public_root(engine: AnchorEngine, root: Digest) -> None:
    """Make the engine publish ``root`` instead of its real tree root."""
    engine.public_root_override = root


def corrupt_engine_tree(engine: AnchorEngine, key: bytes | None = None) -> None:
    """Flip one byte in a leaf of the engine's in-memory tree of roots."""
    tree = engine.tree
    if not len(tree):
        raise NothingToTamper("engine tree is empty")
    key = key if key is not None else tree.keys()[0]
    engine._tree = tree.insert(key, _flip(tree[key], 0))
