"""Columnar binary cache for 2-D float matrices, plus text manifests.

File layout (all integers little-endian):

    bytes 0..7    magic ``b"COLCACHE"``
    bytes 8..11   format version (uint32, currently 1)
    bytes 12..15  row count (uint32)
    bytes 16..19  column count (uint32)
    bytes 20..    rows * cols float64 values, row-major

Manifests are ``key=value`` text files used for provenance and cache
invalidation; values are stored as written, one pair per line.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

_MAGIC = b"COLCACHE"
_VERSION = 1
_HEADER = struct.Struct("<8sIII")


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Write a 2-D array as a little-endian float64 columnar cache file."""
    arr = np.ascontiguousarray(matrix, dtype="<f8")
    if arr.ndim != 2:
        raise DataError(f"cache files hold 2-D matrices, got shape {arr.shape}")
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, rows, cols))
        fh.write(arr.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    """Read a columnar cache file back into a float64 matrix."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated cache header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise DataError(f"{path}: not a columnar cache file (bad magic)")
    if version != _VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    expected = _HEADER.size + rows * cols * 8
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    return data.reshape(rows, cols).astype(np.float64)


def write_manifest(path: str | Path, entries: dict[str, str]) -> None:
    lines = [f"{key}={value}" for key, value in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    entries: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}: malformed manifest line {line!r}")
        entries[key] = value
    return entries


def digest_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def digest_array(arr: np.ndarray) -> str:
    return digest_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def digest_file(path: str | Path) -> str:
    return digest_bytes(Path(path).read_bytes())
