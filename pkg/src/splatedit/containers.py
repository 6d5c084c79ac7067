"""Tagged binary container shared by trajectory and attention-record files.

Layout (little endian)::

    magic     8 bytes   e.g. b"NOISTRAJ"
    version   uint32
    hlen      uint32    length of the JSON header in bytes
    header    hlen bytes of UTF-8 JSON: {"meta": {...}, "arrays": [...]}
    payload   raw array bytes, concatenated in header order

Each array entry in the header records ``name``, ``dtype``, ``shape``,
``offset`` (relative to the payload start) and ``nbytes``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

VERSION = 1
_PREFIX = struct.Struct("<8sII")


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise DataError(f"{path}: file too short for a container header")
    got, version, hlen = _PREFIX.unpack_from(data)
    if got != magic:
        raise DataError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    start = _PREFIX.size + hlen
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt container header") from exc
    arrays = {}
    for entry in header["arrays"]:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise DataError(f"{path}: truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays
