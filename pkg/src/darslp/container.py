"""Single-file tensor container used by the checkpoint formats.

    <tag>\\n | u64 header length | header JSON (utf-8) | raw little-endian tensors

The header holds caller metadata under ``"meta"`` and a tensor index
(name, dtype, shape, offset into the payload).
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def digest(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def write_container(path, tag: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    index, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = canonical_json({"meta": meta, "tensors": index}).encode()
    with open(path, "wb") as fh:
        fh.write(tag.encode() + b"\n")
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def read_container(path, tag: str) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    head = tag.encode() + b"\n"
    if not data.startswith(head):
        raise FormatError(f"{path}: not a {tag} container", offset=0)
    pos = len(head)
    if len(data) < pos + 8:
        raise FormatError(f"{path}: truncated header length", offset=len(data))
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header", offset=pos) from exc
    pos += hlen
    tensors = {}
    for entry in header["tensors"]:
        start = pos + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(data):
            raise FormatError(f"{path}: tensor {entry['name']} truncated", offset=len(data))
        arr = np.frombuffer(data[start:end], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], tensors
