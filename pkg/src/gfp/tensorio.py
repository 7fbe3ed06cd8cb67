"""Versioned binary container of named tensors plus a JSON header.

Layout (all little-endian)::

    magic "SKT1" | version u16 | kind u16 | header_len u32 | header (utf-8 JSON)
    | num_records u32 | records...

Each record is ``name_len u16, name utf-8, dtype u8, ndim u8, dims u32 x ndim``
followed by the raw row-major payload. Used for checkpoints and feature banks.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"SKT1"
VERSION = 1
KIND_CHECKPOINT = 1
KIND_FEATURES = 2

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def dumps(tensors: dict[str, np.ndarray], header: dict, kind: int) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [struct.pack("<4sHHI", MAGIC, VERSION, kind, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack(f"<BB{arr.ndim}I", _CODES[dt], arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


def loads(buf: bytes, kind: int | None = None) -> tuple[dict[str, np.ndarray], dict]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated tensor container at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    magic, version, file_kind, head_len = struct.unpack("<4sHHI", take(12))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    if kind is not None and file_kind != kind:
        raise FormatError(f"container kind {file_kind}, expected {kind}")
    try:
        header = json.loads(take(head_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes in tensor container")
    return tensors, header


def save(path: str | Path, tensors: dict[str, np.ndarray], header: dict, kind: int) -> None:
    Path(path).write_bytes(dumps(tensors, header, kind))


def load(path: str | Path, kind: int | None = None) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes(), kind)
