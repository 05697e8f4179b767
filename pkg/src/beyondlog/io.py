"""Binary artifact formats: item embedding matrices and parameter checkpoints.

Embedding file: ``RSEQEMB1`` | rows u64 LE | dim u32 LE | rows*dim float32 LE,
row-major, with a sidecar text file holding one item id per line.

Checkpoint: ``RSEQCKPT`` | version u32 LE | header length u64 LE | JSON header
| tensor bytes. The header lists every tensor's name, dtype, shape and byte
offset into the body, plus free-form metadata.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import ParamStore

EMB_MAGIC = b"RSEQEMB1"
CKPT_MAGIC = b"RSEQCKPT"
CKPT_VERSION = 1
_EMB_HEAD = struct.Struct("<8sQI")
_CKPT_HEAD = struct.Struct("<8sIQ")


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class CheckpointMismatch(ValueError):
    pass


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def ids_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".ids")


def write_embeddings(path: str | Path, item_ids: Sequence[int], matrix: np.ndarray) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != len(item_ids):
        raise ValueError(f"matrix shape {m.shape} does not fit {len(item_ids)} ids")
    body = np.ascontiguousarray(m, dtype="<f4").tobytes()
    path = Path(path)
    _atomic_write(path, _EMB_HEAD.pack(EMB_MAGIC, m.shape[0], m.shape[1]) + body)
    _atomic_write(ids_path(path), "".join(f"{int(i)}\n" for i in item_ids).encode("ascii"))


def read_embeddings(path: str | Path) -> tuple[list[int], np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _EMB_HEAD.size:
        raise FormatError("file shorter than the header", len(data))
    magic, rows, dim = _EMB_HEAD.unpack_from(data, 0)
    if magic != EMB_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    want = _EMB_HEAD.size + rows * dim * 4
    if len(data) != want:
        raise FormatError(f"body holds {len(data) - _EMB_HEAD.size} bytes, header implies {rows * dim * 4}",
                          min(len(data), want))
    mat = np.frombuffer(data, dtype="<f4", offset=_EMB_HEAD.size).reshape(rows, dim).astype(np.float32)
    ids = [int(x) for x in ids_path(path).read_text(encoding="ascii").split()]
    if len(ids) != rows:
        raise FormatError(f"id sidecar lists {len(ids)} ids for {rows} rows", 0)
    return ids, mat


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in store.names():
        arr = np.ascontiguousarray(store[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>=|"), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode("utf-8")
    _atomic_write(Path(path), _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(chunks))


def load_checkpoint(path: str | Path, into: ParamStore | None = None) -> tuple[ParamStore, dict]:
    """Read a checkpoint; with ``into`` the names and shapes must match that store exactly."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise FormatError("file shorter than the header", len(data))
    magic, version, hlen = _CKPT_HEAD.unpack_from(data, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unknown checkpoint version {version}", 8)
    start = _CKPT_HEAD.size
    if len(data) < start + hlen:
        raise FormatError("truncated header", len(data))
    header = json.loads(data[start:start + hlen])
    body = start + hlen
    arrays = {}
    for e in header["tensors"]:
        lo = body + e["offset"]
        if lo + e["nbytes"] > len(data):
            raise FormatError(f"tensor {e['name']!r} is truncated", len(data))
        arrays[e["name"]] = np.frombuffer(data, dtype=np.dtype(e["dtype"]).newbyteorder("<"), count=int(
            np.prod(e["shape"], dtype=np.int64)), offset=lo).reshape(e["shape"]).astype(e["dtype"])
    if into is not None:
        missing = sorted(set(into.names()) - set(arrays))
        extra = sorted(set(arrays) - set(into.names()))
        if missing or extra:
            raise CheckpointMismatch(f"checkpoint lacks {missing} and has unexpected {extra}")
        bad = [f"{n}: {arrays[n].shape} vs {into[n].shape}" for n in into.names() if arrays[n].shape != into[n].shape]
        if bad:
            raise CheckpointMismatch("shape mismatch: " + "; ".join(bad))
        for n in into.names():
            into.params[n][...] = arrays[n]
        return into, header["meta"]
    store = ParamStore()
    for e in header["tensors"]:
        store.add(e["name"], arrays[e["name"]])
    return store, header["meta"]
