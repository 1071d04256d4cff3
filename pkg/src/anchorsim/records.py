"""Wire records shared between the chain simulator and the anchoring engine."""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .merkle import Digest, MalformedEncoding

_RECORD = struct.Struct(">32s32sQQ")


def to_millis(t: float) -> int:
    """Virtual seconds to the integer milliseconds used in all encodings."""
    return int(round(t * 1000))


@dataclass(frozen=True)
class AnchorRecord:
    """Payload written to the public chain once per anchoring round."""

    root: Digest
    previous_root: Digest
    round_id: int
    anchored_at: float

    def encode(self) -> bytes:
        return _RECORD.pack(self.root, self.previous_root, self.round_id, to_millis(self.anchored_at))

    @classmethod
    def decode(cls, data: bytes) -> AnchorRecord:
        if len(data) != _RECORD.size:
            raise MalformedEncoding(f"AnchorRecord must be {_RECORD.size} bytes")
        root, prev, round_id, millis = _RECORD.unpack(data)
        return cls(root, prev, round_id, millis / 1000)

    def to_dict(self) -> dict:
        return {
            "root": self.root.hex(),
            "previous_root": self.previous_root.hex(),
            "round_id": self.round_id,
            "anchored_at": self.anchored_at,
        }
