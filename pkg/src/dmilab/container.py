"""Little binary container for named arrays plus a JSON metadata block.

Layout::

    magic      8 bytes   b"DMILAB\\0" + kind byte (b"B" bundle, b"C" checkpoint)
    version    uint16 LE
    header_len uint32 LE
    header     UTF-8 JSON: {"meta": ..., "arrays": [[name, dtype, shape], ...]}
    payload    arrays back to back, little-endian, C order

dtype is ``"f8"`` or ``"i8"``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

VERSION = 1
_PREFIX = b"DMILAB\x00"
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class ContainerError(Exception):
    pass


class FormatError(ContainerError):
    """Magic bytes or header are not what this reader understands."""


class VersionError(ContainerError):
    pass


class TruncationError(ContainerError):
    pass


def _dtype_code(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return "i8"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def dumps(kind: bytes, meta: dict, arrays: Mapping[str, np.ndarray]) -> bytes:
    table, chunks = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        table.append([name, code, list(arr.shape)])
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode()
    head = _PREFIX + kind + struct.pack("<HI", VERSION, len(header))
    return head + header + b"".join(chunks)


def loads(blob: bytes, kind: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 14:
        raise TruncationError(f"file is {len(blob)} bytes; too short for a header")
    if blob[:7] != _PREFIX or blob[7:8] != kind:
        raise FormatError(f"bad magic {blob[:8]!r}; expected {_PREFIX + kind!r}")
    version, hlen = struct.unpack("<HI", blob[8:14])
    if version != VERSION:
        raise VersionError(f"container version {version}; this reader handles {VERSION}")
    if len(blob) < 14 + hlen:
        raise TruncationError("header extends past end of file")
    try:
        header = json.loads(blob[14:14 + hlen].decode())
        table = header["arrays"]
        meta = header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    arrays: dict[str, np.ndarray] = {}
    pos = 14 + hlen
    for name, code, shape in table:
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code!r} for {name}")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(blob):
            raise TruncationError(f"array {name!r} truncated")
        arrays[name] = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize,
                                     offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += nbytes
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after payload")
    return meta, arrays


def save(path, kind: bytes, meta: dict, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path, kind: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), kind)
