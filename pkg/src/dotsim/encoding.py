"""Canonical byte encodings.

Every signed or hashed object in the simulator is serialized through this
module so signatures are well defined everywhere a value travels: wire
payloads, ledger transactions, key shares, puzzles.  The scheme is
length-prefixed (u64 big-endian) and therefore injective: two distinct field
tuples never produce equal bytes.

Byte layout of a ledger transaction (also documented in the README):

    u8            ledger kind tag (0x01 scriptless, 0x02 timelock)
    u64 | bytes   asset id (utf-8)
    32 bytes      destination verification key
    u64           timelock round      (timelock kind only)
    u64 | bytes   opaque payload (may embed a nested encoded tx)

Signatures cover exactly these bytes.
"""

from __future__ import annotations

SCALAR_BYTES = 32


def encode_u64(value: int) -> bytes:
    if value < 0:
        raise ValueError("u64 fields must be non-negative")
    return value.to_bytes(8, "big")


def encode_bytes(data: bytes) -> bytes:
    return encode_u64(len(data)) + data


def encode_int(value: int) -> bytes:
    """Fixed-width 32-byte big-endian integer (group elements, scalars)."""
    return value.to_bytes(SCALAR_BYTES, "big")


def decode_int(data: bytes) -> int:
    if len(data) != SCALAR_BYTES:
        raise ValueError("expected %d bytes" % SCALAR_BYTES)
    return int.from_bytes(data, "big")


def pack(tag: str, *fields: bytes) -> bytes:
    """Tagged message: length-prefixed tag followed by length-prefixed fields."""
    out = [encode_bytes(tag.encode())]
    out.extend(encode_bytes(f) for f in fields)
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self) -> bytes:
        if self.pos + 8 > len(self.data):
            raise ValueError("truncated message")
        n = int.from_bytes(self.data[self.pos:self.pos + 8], "big")
        self.pos += 8
        if self.pos + n > len(self.data):
            raise ValueError("truncated message")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def unpack(data: bytes) -> tuple[str, list[bytes]]:
    """Inverse of :func:`pack`. Raises ValueError on malformed input."""
    r = _Reader(data)
    tag = r.take().decode()
    fields = []
    while not r.done:
        fields.append(r.take())
    return tag, fields
