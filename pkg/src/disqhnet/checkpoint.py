"""Deterministic binary checkpoint container.

Layout (all integers little-endian)::

    offset 0   4 bytes   magic b"DQCK"
    offset 4   u32       format version (currently 1)
    offset 8   u64       header length H
    offset 16  H bytes   UTF-8 JSON header, keys sorted
    offset 16+H          float64 payload, tensors back to back

The header holds ``config`` (the run config as INI text), ``meta`` (plain
JSON values such as epoch and best validation loss) and ``tensors``, a list
of ``{"name", "shape", "offset", "nbytes"}`` with offsets relative to the
payload start. Identical contents always serialize to identical bytes.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DQCK"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)


def encode(ck: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(ck.tensors):
        arr = np.ascontiguousarray(ck.tensors[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": ck.config_text, "meta": ck.meta, "tensors": index},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC or len(buf) < 16:
        raise FormatError("not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(buf) < 16 + hlen:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    base = 16 + hlen
    tensors = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        if start + t["nbytes"] > len(buf):
            raise FormatError(f"truncated payload for {t['name']}")
        arr = np.frombuffer(buf, dtype="<f8", count=t["nbytes"] // 8, offset=start)
        tensors[t["name"]] = arr.astype(np.float64).reshape(t["shape"])
    return Checkpoint(header["config"], tensors, header["meta"])


def save(ck: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ck))


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return decode(p.read_bytes())
