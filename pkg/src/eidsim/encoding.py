"""Length-prefixed canonical encoding shared by certificates, actor and EAC messages.

A record is a concatenation of fields, each a 4-byte big-endian length
followed by the raw bytes.  Integers are 8-byte big-endian, text is UTF-8.
"""

from __future__ import annotations

import struct
from collections.abc import Iterable, Sequence


class DecodeError(ValueError):
    pass


def pack(fields: Iterable[bytes]) -> bytes:
    out = bytearray()
    for f in fields:
        out += struct.pack(">I", len(f))
        out += f
    return bytes(out)


def unpack(blob: bytes, expected: int | None = None) -> list[bytes]:
    fields = []
    pos = 0
    while pos < len(blob):
        if pos + 4 > len(blob):
            raise DecodeError("truncated length prefix")
        (n,) = struct.unpack_from(">I", blob, pos)
        pos += 4
        if pos + n > len(blob):
            raise DecodeError("truncated field")
        fields.append(blob[pos:pos + n])
        pos += n
    if expected is not None and len(fields) != expected:
        raise DecodeError(f"expected {expected} fields, got {len(fields)}")
    return fields


def u64(n: int) -> bytes:
    return struct.pack(">Q", n)


def read_u64(b: bytes) -> int:
    if len(b) != 8:
        raise DecodeError("integer field must be 8 bytes")
    return struct.unpack(">Q", b)[0]


def text(s: str) -> bytes:
    return s.encode("utf-8")


def read_text(b: bytes) -> str:
    try:
        return b.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid utf-8 text field") from exc


def pack_texts(items: Sequence[str]) -> bytes:
    return pack(text(s) for s in items)


def unpack_texts(blob: bytes) -> list[str]:
    return [read_text(b) for b in unpack(blob)]


def message(kind: str, *fields: bytes) -> bytes:
    """Actor message: first field is the message kind."""
    return pack((text(kind), *fields))


def read_message(blob: bytes) -> tuple[str, list[bytes]]:
    fields = unpack(blob)
    if not fields:
        raise DecodeError("empty message")
    return read_text(fields[0]), fields[1:]
