"""Deterministic, incompressible test payloads.

Block ``i`` of stream ``s`` under seed ``k`` is
``SHA-256(k || s || i)`` (each field 8 bytes big-endian), so any byte
offset can be produced independently and two runs with the same seed
yield identical bytes.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Iterator

BLOCK = 32
_PIECE_BLOCKS = 1 << 15  # 1 MiB per yielded piece


def _prefix(seed: int, stream: int) -> bytes:
    return struct.pack(">QQ", seed & (2**64 - 1), stream & (2**64 - 1))


def iter_payload(seed: int, stream: int, size: int, offset: int = 0) -> Iterator[bytes]:
    """Yield payload bytes ``[offset, size)`` in pieces of about 1 MiB."""
    if size < 0 or offset < 0:
        raise ValueError("size and offset must be non-negative")
    prefix = _prefix(seed, stream)
    sha = hashlib.sha256
    pack = struct.Struct(">Q").pack
    block = offset // BLOCK
    skip = offset - block * BLOCK
    pos = offset
    while pos < size:
        n = min(_PIECE_BLOCKS, (size - pos + skip + BLOCK - 1) // BLOCK)
        piece = b"".join([sha(prefix + pack(i)).digest() for i in range(block, block + n)])
        piece = piece[skip: skip + (size - pos)]
        skip = 0
        block += n
        pos += len(piece)
        yield piece


def payload_bytes(seed: int, stream: int, size: int) -> bytes:
    return b"".join(iter_payload(seed, stream, size))


def payload_digest(seed: int, stream: int, size: int) -> str:
    h = hashlib.sha256()
    for piece in iter_payload(seed, stream, size):
        h.update(piece)
    return h.hexdigest()


def write_payload(path: str, seed: int, stream: int, size: int) -> str:
    """Write the payload to ``path``; returns its SHA-256."""
    h = hashlib.sha256()
    with open(path, "wb") as f:
        for piece in iter_payload(seed, stream, size):
            f.write(piece)
            h.update(piece)
    return h.hexdigest()
