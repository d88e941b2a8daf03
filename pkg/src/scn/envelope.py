"""Binary container shared by checkpoints and feature sets.

Layout::

    <compact JSON header>\\n
    <little-endian float32 payloads, in tensor-directory order>
    <8-byte little-endian CRC-64 of everything above>

The header's ``tensors`` entry maps name -> [shape, byte offset, byte length],
offsets relative to the first payload byte. CRC-64 uses the ECMA-182
polynomial in reflected form with all-ones init and final xor (CRC-64/XZ).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_POLY = 0xC96C5795D7870F42


def _make_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _make_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ; ``crc64(b"123456789") == 0x995DC9BBDF1939FA``."""
    crc ^= 0xFFFFFFFFFFFFFFFF
    table = _TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


class EnvelopeError(Exception):
    """Base class; ``code`` distinguishes the failure kind."""

    code = "invalid"


class VersionMismatchError(EnvelopeError):
    code = "version-mismatch"


class TruncatedPayloadError(EnvelopeError):
    code = "truncated"


class ChecksumError(EnvelopeError):
    code = "checksum"


def pack(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    directory = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory[name] = [list(np.shape(arr)), offset, len(blob)]
        blobs.append(blob)
        offset += len(blob)
    head = dict(header, format_version=FORMAT_VERSION, tensors=directory)
    body = json.dumps(head, separators=(",", ":"), sort_keys=False).encode("utf-8") + b"\n" + b"".join(blobs)
    return body + struct.pack("<Q", crc64(body))


def unpack(raw: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    nl = raw.find(b"\n")
    if nl < 0:
        raise TruncatedPayloadError("missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        directory = header["tensors"]
        need = sum(int(entry[2]) for entry in directory.values())
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise EnvelopeError(f"unreadable header: {e}") from None
    start = nl + 1
    if len(raw) != start + need + 8:
        raise TruncatedPayloadError(f"expected {start + need + 8} bytes, found {len(raw)}")
    (stored,) = struct.unpack("<Q", raw[-8:])
    if crc64(raw[:-8]) != stored:
        raise ChecksumError("CRC-64 mismatch")
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"format_version {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise EnvelopeError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    tensors = {}
    for name, (shape, off, length) in directory.items():
        buf = raw[start + off : start + off + length]
        tensors[name] = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(shape)
    return header, tensors


def write(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    data = pack(header, tensors)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def read(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes(), kind)
