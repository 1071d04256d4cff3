"""
Canonical Merkle map: sorted-leaf balanced binary tree over SHA-256.

Used for tenant chain state, the tree of roots, and inclusion proofs.

Byte layout
-----------
* leaf      = H(0x00 || u32be(len(key)) || key || u32be(len(value)) || value)
* internal  = H(0x01 || left || right)
* empty map = H(0x02)

Leaves are ordered by ascending raw key bytes and folded pairwise, level by
level. A trailing odd node is promoted to the next level unhashed.

Serialized form: u32be(count), then per entry u32be(len(key)) || key ||
u32be(len(value)) || value, keys strictly ascending.
"""

from __future__ import annotations

import bisect
import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping

Digest = bytes

LEAF_TAG = b"\x00"
NODE_TAG = b"\x01"
EMPTY_TAG = b"\x02"

EMPTY_ROOT: Digest = hashlib.sha256(EMPTY_TAG).digest()

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")


class MerkleError(Exception):
    pass


class KeyAbsent(MerkleError, KeyError):
    pass


class MalformedEncoding(MerkleError, ValueError):
    pass


def sha256(data: bytes) -> Digest:
    return hashlib.sha256(data).digest()


def leaf_hash(key: bytes, value: bytes) -> Digest:
    return hashlib.sha256(
        LEAF_TAG + _U32.pack(len(key)) + key + _U32.pack(len(value)) + value
    ).digest()


def node_hash(left: Digest, right: Digest) -> Digest:
    return hashlib.sha256(NODE_TAG + left + right).digest()


def _next_level(level: list[Digest]) -> list[Digest]:
    out = [node_hash(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
    if len(level) % 2:
        out.append(level[-1])
    return out


def fold_root(leaves: list[Digest]) -> Digest:
    """Root over already-hashed leaves in their final order."""
    if not leaves:
        return EMPTY_ROOT
    level = leaves
    while len(level) > 1:
        level = _next_level(level)
    return level[0]


class MerkleMap:
    """Immutable key/value map with a canonical Merkle root.

    Updates return new maps; the receiver is never modified, so instances can
    be shared freely between readers.
    """

    __slots__ = ("_data", "_keys", "_root")

    def __init__(self, entries: Mapping[bytes, bytes] | Iterable[tuple[bytes, bytes]] = ()):
        data = dict(entries.items() if isinstance(entries, Mapping) else entries)
        for k, v in data.items():
            if not isinstance(k, (bytes, bytearray)) or not isinstance(v, (bytes, bytearray)):
                raise TypeError("MerkleMap keys and values must be bytes")
        self._data: dict[bytes, bytes] = {bytes(k): bytes(v) for k, v in data.items()}
        self._keys: list[bytes] | None = None
        self._root: Digest | None = None

    # -- mapping protocol -------------------------------------------------

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key: object) -> bool:
        return key in self._data

    def __getitem__(self, key: bytes) -> bytes:
        return self._data[key]

    def __iter__(self) -> Iterator[bytes]:
        return iter(self.keys())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MerkleMap):
            return NotImplemented
        return self._data == other._data

    def __hash__(self) -> int:
        return hash(self.root)

    def __repr__(self) -> str:
        return f"MerkleMap(len={len(self)}, root={self.root.hex()[:16]}…)"

    def get(self, key: bytes, default: bytes | None = None) -> bytes | None:
        return self._data.get(key, default)

    def keys(self) -> list[bytes]:
        if self._keys is None:
            self._keys = sorted(self._data)
        return list(self._keys)

    def items(self) -> list[tuple[bytes, bytes]]:
        return [(k, self._data[k]) for k in self.keys()]

    # -- persistent updates -----------------------------------------------

    def insert(self, key: bytes, value: bytes) -> MerkleMap:
        return self.update({key: value})

    def update(self, entries: Mapping[bytes, bytes]) -> MerkleMap:
        if all(self._data.get(k) == v for k, v in entries.items()):
            return self
        data = dict(self._data)
        data.update(entries)
        return MerkleMap(data)

    # -- hashing ------------------------------------------------------------

    @property
    def root(self) -> Digest:
        if self._root is None:
            self._root = fold_root([leaf_hash(k, self._data[k]) for k in self.keys()])
        return self._root

    def prove(self, key: bytes) -> InclusionProof:
        if key not in self._data:
            raise KeyAbsent(key)
        keys = self.keys()
        index = bisect.bisect_left(keys, key)
        level = [leaf_hash(k, self._data[k]) for k in keys]
        path: list[tuple[Digest, bool]] = []
        while len(level) > 1:
            sibling = index ^ 1
            if sibling < len(level):
                # flag True: sibling sits to the left
                path.append((level[sibling], sibling < index))
            level = _next_level(level)
            index //= 2
        return InclusionProof(key, self._data[key], tuple(path))


@dataclass(frozen=True)
class InclusionProof:
    key: bytes
    value: bytes
    path: tuple[tuple[Digest, bool], ...]

    def compute_root(self) -> Digest:
        h = leaf_hash(self.key, self.value)
        for sibling, sibling_left in self.path:
            h = node_hash(sibling, h) if sibling_left else node_hash(h, sibling)
        return h

    def to_dict(self) -> dict:
        return {
            "key": self.key.hex(),
            "value": self.value.hex(),
            "path": [{"sibling": s.hex(), "left": left} for s, left in self.path],
        }


def verify_proof(proof: InclusionProof, root: Digest) -> bool:
    try:
        for sibling, flag in proof.path:
            if len(sibling) != 32 or not isinstance(flag, bool):
                return False
        return proof.compute_root() == root
    except (TypeError, ValueError):
        return False


# Functional surface ---------------------------------------------------------

def map_insert(m: MerkleMap, key: bytes, value: bytes) -> MerkleMap:
    return m.insert(key, value)


def map_root(m: MerkleMap) -> Digest:
    return m.root


def map_prove(m: MerkleMap, key: bytes) -> InclusionProof:
    return m.prove(key)


def serialize_map(m: MerkleMap) -> bytes:
    parts = [_U32.pack(len(m))]
    for k, v in m.items():
        parts += [_U32.pack(len(k)), k, _U32.pack(len(v)), v]
    return b"".join(parts)


def deserialize_map(data: bytes) -> MerkleMap:
    view = memoryview(bytes(data))
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise MalformedEncoding(f"truncated at offset {pos}")
        chunk = view[pos:pos + n].tobytes()
        pos += n
        return chunk

    (count,) = _U32.unpack(take(4))
    entries: dict[bytes, bytes] = {}
    prev: bytes | None = None
    for _ in range(count):
        (klen,) = _U32.unpack(take(4))
        key = take(klen)
        (vlen,) = _U32.unpack(take(4))
        value = take(vlen)
        if prev is not None and key <= prev:
            raise MalformedEncoding("keys not strictly ascending")
        entries[key] = value
        prev = key
    if pos != len(view):
        raise MalformedEncoding(f"{len(view) - pos} trailing bytes")
    return MerkleMap(entries)


# Leaf payload for the tree of roots -----------------------------------------

@dataclass(frozen=True)
class LeafRecord:
    """Latest known head of one tenant chain, as stored in the tree of roots."""

    state_root: Digest
    block_number: int
    block_hash: Digest

    SIZE = 72

    def __post_init__(self) -> None:
        if len(self.state_root) != 32 or len(self.block_hash) != 32:
            raise ValueError("LeafRecord digests must be 32 bytes")
        if self.block_number < 0:
            raise ValueError("block_number must be non-negative")

    def encode(self) -> bytes:
        return self.state_root + _U64.pack(self.block_number) + self.block_hash

    @classmethod
    def decode(cls, data: bytes) -> LeafRecord:
        if len(data) != cls.SIZE:
            raise MalformedEncoding(f"LeafRecord must be {cls.SIZE} bytes, got {len(data)}")
        (number,) = _U64.unpack(data[32:40])
        return cls(bytes(data[:32]), number, bytes(data[40:]))

    def to_dict(self) -> dict:
        return {
            "state_root": self.state_root.hex(),
            "block_number": self.block_number,
            "block_hash": self.block_hash.hex(),
        }


class IncrementalRoot:
    """Mutable Merkle accumulator producing the same root as ``MerkleMap``.

    Chain state grows to hundreds of thousands of keys, so rebuilding the whole
    tree per block is too slow. Level arrays are cached; a value overwrite
    rehashes one path, an insertion rehashes everything to its right (cheap for
    the append-mostly key patterns produced by sequential IDs).
    """

    def __init__(self, entries: Mapping[bytes, bytes] | None = None):
        self._keys: list[bytes] = []
        self._levels: list[list[Digest]] = [[]]
        if entries:
            self.apply(entries)

    def __len__(self) -> int:
        return len(self._keys)

    @property
    def root(self) -> Digest:
        if not self._keys:
            return EMPTY_ROOT
        return self._levels[-1][0]

    def apply(self, updates: Mapping[bytes, bytes]) -> Digest:
        keys = self._keys
        leaves = self._levels[0]
        first_insert: int | None = None
        touched: list[int] = []
        for key in sorted(updates):
            i = bisect.bisect_left(keys, key)
            h = leaf_hash(key, updates[key])
            if i < len(keys) and keys[i] == key:
                leaves[i] = h
                touched.append(i)
            else:
                keys.insert(i, key)
                leaves.insert(i, h)
                if first_insert is None:
                    first_insert = i
        if first_insert is not None:
            # overwrites left of the first insert are not covered by the rebuild
            start = min([first_insert] + touched)
            self._rebuild_from(start)
        elif touched:
            self._rehash_paths(touched)
        return self.root

    def _rebuild_from(self, start: int) -> None:
        levels = self._levels
        depth = 0
        while len(levels[depth]) > 1:
            level = levels[depth]
            keep = start // 2
            parents = levels[depth + 1][:keep] if depth + 1 < len(levels) else []
            for i in range(2 * keep, len(level) - 1, 2):
                parents.append(node_hash(level[i], level[i + 1]))
            if len(level) % 2:
                parents.append(level[-1])
            if depth + 1 < len(levels):
                levels[depth + 1] = parents
            else:
                levels.append(parents)
            start = keep
            depth += 1
        del levels[depth + 1:]

    def _rehash_paths(self, indices: list[int]) -> None:
        levels = self._levels
        dirty = set(indices)
        for depth in range(len(levels) - 1):
            level, parents = levels[depth], levels[depth + 1]
            up = {i // 2 for i in dirty}
            for p in up:
                left = 2 * p
                if left + 1 < len(level):
                    parents[p] = node_hash(level[left], level[left + 1])
                else:
                    parents[p] = level[left]
            dirty = up
