"""Binary container shared by datasets and checkpoints.

Layout::

    b"NODEONET"            8 bytes magic
    version                uint32 little-endian
    header_len             uint32 little-endian
    header                 UTF-8 JSON, space-padded so the payload starts 8-byte aligned
    payload                little-endian float64 arrays, each at an 8-byte aligned offset

The header is ``{"arrays": [{"name", "shape", "byte_offset"}, ...], "meta": {...}}``
with offsets relative to the start of the payload. Arrays are written in
name order and the JSON is serialized with sorted keys, so equal content
always gives equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError

MAGIC = b"NODEONET"
VERSION = 1
_PREFIX = struct.Struct("<8sII")


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def to_bytes(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        if arr.dtype.kind not in "fiub":
            raise ContainerFormatError(f"array {name!r} has non-numeric dtype {arr.dtype}")
        data = np.ascontiguousarray(arr, dtype="<f8")
        if arr.dtype.kind in "iu" and not np.array_equal(data, arr):
            raise ContainerFormatError(f"integer array {name!r} is not exactly representable as float64")
        entries.append({"name": name, "shape": list(data.shape), "byte_offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes  # float64 keeps every offset 8-byte aligned
    try:
        header = _canonical_json({"arrays": entries, "meta": meta or {}}).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise ContainerFormatError(f"metadata is not JSON-serializable: {exc}") from exc
    pad = (-(_PREFIX.size + len(header))) % 8
    header += b" " * pad
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def from_bytes(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(buf) < _PREFIX.size:
        raise ContainerFormatError("file too short for a container header")
    magic, version, header_len = _PREFIX.unpack_from(buf, 0)
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    start = _PREFIX.size + header_len
    if start > len(buf) or start % 8:
        raise ContainerFormatError("header length out of range or misaligned")
    try:
        header = json.loads(buf[_PREFIX.size:start].decode("utf-8"))
        entries, meta = header["arrays"], header["meta"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ContainerFormatError(f"corrupt header: {exc}") from exc
    payload = memoryview(buf)[start:]
    arrays = {}
    spans = []
    for e in entries:
        try:
            name, shape, off = e["name"], tuple(int(s) for s in e["shape"]), int(e["byte_offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ContainerFormatError(f"corrupt array entry {e!r}") from exc
        if any(s < 0 for s in shape):
            raise ContainerFormatError(f"array {name!r} has a negative dimension")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off % 8 or off < 0 or off + nbytes > len(payload):
            raise ContainerFormatError(f"array {name!r} lies outside the payload or is misaligned")
        spans.append((off, off + nbytes, name))
        arrays[name] = np.frombuffer(payload[off:off + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
    spans.sort()
    for (a0, a1, n0), (b0, b1, n1) in zip(spans, spans[1:]):
        if b0 < a1 and b1 > b0:
            raise ContainerFormatError(f"arrays {n0!r} and {n1!r} overlap")
    return arrays, meta


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write atomically (temp file + rename) so readers never see a partial file."""
    path = Path(path)
    data = to_bytes(arrays, meta)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise ContainerFormatError(f"cannot read {path}: {exc}") from exc
    return from_bytes(buf)
