"""Framed binary file helpers shared by the dataset and checkpoint formats.

Layout: 4-byte magic, u16 version, u32 JSON-header length, JSON header
(UTF-8, canonical key order), raw payload. All integers little-endian.
Writes are atomic: temp file in the target directory, fsync, rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path


class BadMagic(ValueError):
    """File does not start with the expected magic (or is truncated)."""


class BadVersion(ValueError):
    """File magic is right but the format version is unsupported."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_framed(path: str | Path, magic: bytes, version: int, header: dict, payload: bytes) -> None:
    assert len(magic) == 4
    head = canonical_json(header)
    blob = magic + struct.pack("<H", version) + struct.pack("<I", len(head)) + head + payload
    atomic_write_bytes(path, blob)


def atomic_write_bytes(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_framed(path: str | Path, magic: bytes, version: int) -> tuple[dict, bytes]:
    """Read and validate a framed file; returns (header, payload)."""
    blob = Path(path).read_bytes()
    if len(blob) < 10 or blob[:4] != magic:
        raise BadMagic(f"{path}: expected magic {magic!r}, got {blob[:4]!r}")
    got_version = struct.unpack("<H", blob[4:6])[0]
    if got_version != version:
        raise BadVersion(f"{path}: format version {got_version}, supported {version}")
    head_len = struct.unpack("<I", blob[6:10])[0]
    if len(blob) < 10 + head_len:
        raise BadMagic(f"{path}: truncated header ({len(blob)} bytes, header wants {head_len})")
    try:
        header = json.loads(blob[10 : 10 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise BadMagic(f"{path}: corrupt header: {e}") from e
    return header, blob[10 + head_len :]
