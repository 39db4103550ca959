"""Checkpoint format: JSON header followed by a little-endian float64 payload.

Layout::

    b"MOMT" | uint32 version | uint64 header length | header JSON (utf-8) | payload

The header lists ``{"name", "shape", "offset"}`` per tensor, with
``offset`` counted in float64 elements from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"MOMT"
VERSION = 1


def dumps(tensors: Mapping[str, Tensor | np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    header = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise ValueError("not a tensor checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    payload = np.frombuffer(blob, dtype="<f8", offset=start + hlen)
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = payload[e["offset"]:e["offset"] + n].astype(np.float64).reshape(e["shape"])
    return out


def save(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
