"""Line-delimited records and versioned binary bundles.

A bundle file is::

    MAGIC (8 bytes) | header length (uint64, little endian) | JSON header | array bytes

The header carries a ``kind`` and ``format_version`` plus, for every array,
its dtype, shape and byte offset into the payload. Output is byte-stable for
identical inputs: keys are sorted and arrays are written C-contiguous in
header order.
"""

from __future__ import annotations

import contextlib
import csv
import contextvars
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

MAGIC = b"EBRSIM\x00\x01"
FORMAT_VERSION = 1


STAMP_TYPE = "stamp"

_stamp: contextvars.ContextVar[str | None] = contextvars.ContextVar("ebrsim_stamp", default=None)


class BundleFormatError(ValueError):
    pass


@contextlib.contextmanager
def stamped(fingerprint: str):
    """Within the block, every bundle and record file written carries ``fingerprint``."""
    token = _stamp.set(fingerprint)
    try:
        yield
    finally:
        _stamp.reset(token)


def current_stamp() -> str | None:
    return _stamp.get()


def stable_hash(obj: Any) -> str:
    """Short content hash of a JSON-serializable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _json_default(x: Any) -> Any:
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def write_bundle(path: str | Path, kind: str, header: dict[str, Any],
                 arrays: dict[str, np.ndarray]) -> None:
    meta = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        chunks.append(a.tobytes())
        meta.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        offset += len(chunks[-1])
    full = {"kind": kind, "format_version": FORMAT_VERSION, "arrays": meta, **header}
    if _stamp.get() is not None:
        full["stamp"] = _stamp.get()
    blob = json.dumps(full, sort_keys=True, separators=(",", ":"), default=_json_default).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)


def read_bundle(path: str | Path, kind: str | None = None
                ) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise BundleFormatError(f"{path}: not a bundle file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise BundleFormatError(
            f"{path}: unsupported format version {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise BundleFormatError(f"{path}: expected {kind!r}, found {header.get('kind')!r}")
    base = 16 + hlen
    arrays = {}
    for m in header["arrays"]:
        dt = np.dtype(m["dtype"])
        count = int(np.prod(m["shape"])) if m["shape"] else 1
        start = base + m["offset"]
        arrays[m["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(
            m["shape"]).copy()
    return header, arrays


def write_jsonl(path: str | Path, records: Iterable[dict[str, Any]]) -> int:
    """Write one JSON object per line; a stamp line leads when a stamp is active."""
    n = 0
    with open(path, "w") as f:
        if _stamp.get() is not None:
            f.write(json.dumps({"type": STAMP_TYPE, "fingerprint": _stamp.get()}, sort_keys=True))
            f.write("\n")
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":"), default=_json_default))
            f.write("\n")
            n += 1
    return n


def read_stamp(path: str | Path) -> str | None:
    """Fingerprint stamped into a bundle, record or CSV file, or None."""
    if Path(path).suffix == ".csv":
        with open(path, newline="") as f:
            row = next(csv.DictReader(f), None)
        return row.get("fingerprint") if row else None
    with open(path, "rb") as f:
        head = f.read(8)
        if head == MAGIC:
            (hlen,) = struct.unpack("<Q", f.read(8))
            return json.loads(f.read(hlen)).get("stamp")
        first = (head + f.readline()).decode().strip()
    try:
        rec = json.loads(first)
    except ValueError:
        return None
    if not isinstance(rec, dict) or rec.get("type") != STAMP_TYPE:
        return None
    return rec.get("fingerprint")


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    """Records of a line-delimited file, without the stamp line."""
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rec = json.loads(line)
                if rec.get("type") != STAMP_TYPE:
                    yield rec
