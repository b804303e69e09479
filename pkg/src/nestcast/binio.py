"""Shared helpers for the binary file formats (datasets, checkpoints, regions).

Every file is: 8-byte magic, format-specific payload, trailing 64-bit FNV-1a
checksum of everything before it. All integers little-endian, all float blobs
little-endian float64. Corruption is reported with distinct error types so
callers can tell a wrong file apart from a damaged one.
"""

from __future__ import annotations

import struct
from typing import Callable

MAGIC_DATASET = b"NESTDS1\x00"
MAGIC_CHECKPOINT = b"NESTCP1\x00"
MAGIC_REGIONS = b"NESTRM1\x00"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


class DataFileError(Exception):
    """Base for all binary-format failures."""


class BadMagicError(DataFileError):
    pass


class TruncatedFileError(DataFileError):
    pass


class ChecksumError(DataFileError):
    pass


def fnv1a(data: bytes) -> int:
    """64-bit FNV-1a over a byte string."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def pack_u32(*values: int) -> bytes:
    for v in values:
        if not (0 <= v <= 0xFFFFFFFF):
            raise ValueError(f"value {v} does not fit in u32")
    return struct.pack(f"<{len(values)}I", *values)


def write_file(path, magic: bytes, payload: bytes) -> None:
    body = magic + payload
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", fnv1a(body)))


def read_file(
    path,
    magic: bytes,
    payload_len: int | Callable[[bytes], int] | None = None,
) -> bytes:
    """Read and verify a file, returning the payload between magic and checksum.

    Magic is checked first, then the payload length (a fixed number or a
    callable deriving it from the payload's own header), then the checksum.
    That order keeps the three corruption modes distinct: a chopped file is
    reported as truncated, not as a checksum mismatch.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(magic):
        raise TruncatedFileError(f"{path}: file shorter than the {len(magic)}-byte magic")
    if raw[: len(magic)] != magic:
        raise BadMagicError(f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    if len(raw) < len(magic) + 8:
        raise TruncatedFileError(f"{path}: missing trailing checksum")
    payload = raw[len(magic) : -8]
    if payload_len is not None:
        expected = payload_len(payload) if callable(payload_len) else payload_len
        if len(payload) < expected:
            raise TruncatedFileError(
                f"{path}: payload has {len(payload)} bytes, expected {expected}"
            )
        if len(payload) > expected:
            raise DataFileError(
                f"{path}: {len(payload) - expected} unexpected trailing bytes"
            )
    stored = struct.unpack("<Q", raw[-8:])[0]
    actual = fnv1a(raw[:-8])
    if stored != actual:
        raise ChecksumError(f"{path}: checksum mismatch (stored {stored:#x}, computed {actual:#x})")
    return payload
