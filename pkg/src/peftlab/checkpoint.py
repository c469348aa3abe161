"""Single-file checkpoint container.

Byte layout (little-endian throughout):

    offset 0   8 bytes   magic b"PEFTCKPT"
    offset 8   u32       format version (currently 1)
    offset 12  u64       header length in bytes
    offset 20  header    UTF-8 JSON, canonical form (sorted keys, compact
                         separators)
    then       payload   raw tensor bytes, concatenated in header order

The header holds {"version", "meta", "tensors": [...]} where each tensor
entry records name, shape, dtype string, trainable flag, byte offset into
the payload, and byte count.  Tensors are sorted by name, dtypes are
written explicitly little-endian, and the JSON is canonical, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

__all__ = ["save_checkpoint", "load_checkpoint", "restore_tensors", "CheckpointError"]

MAGIC = b"PEFTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_tensors, meta: dict | None = None) -> None:
    """`named_tensors` is an iterable of (name, Tensor-or-ndarray, trainable)."""
    entries = []
    for name, tensor, trainable in named_tensors:
        data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
        # tobytes() below serializes in C order; asarray keeps 0-d shapes intact
        entries.append((name, np.asarray(data, dtype=np.float64), bool(trainable)))
    names = [n for n, _, _ in entries]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise CheckpointError(f"duplicate tensor names: {dupes}")
    entries.sort(key=lambda e: e[0])

    records = []
    offset = 0
    for name, data, trainable in entries:
        nbytes = data.size * 8
        records.append({"name": name, "shape": list(data.shape), "dtype": "<f8",
                        "trainable": trainable, "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {"version": VERSION, "meta": meta or {}, "tensors": records}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for _, data, _ in entries:
            fh.write(data.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (tensors, meta) with tensors = {name: (ndarray, trainable)}."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated before header prefix")
    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[_PREFIX.size:header_end].decode("utf-8"))
    payload = raw[header_end:]
    tensors = {}
    for rec in header["tensors"]:
        if rec["dtype"] != "<f8":
            raise CheckpointError(f"{path}: unsupported dtype {rec['dtype']}")
        start, nbytes = rec["offset"], rec["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {rec['name']} extends past payload")
        data = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=start)
        tensors[rec["name"]] = (data.reshape(rec["shape"]).copy(), rec["trainable"])
    return tensors, header["meta"]


def restore_tensors(named_tensors, stored: dict, *, strict: bool = True) -> None:
    """Copy stored arrays into live tensors by name, in place."""
    seen = set()
    for name, tensor, _ in named_tensors:
        if name not in stored:
            if strict:
                raise CheckpointError(f"checkpoint is missing tensor {name}")
            continue
        data, _ = stored[name]
        target = tensor.data if isinstance(tensor, Tensor) else tensor
        if tuple(target.shape) != tuple(data.shape):
            raise CheckpointError(
                f"tensor {name} has shape {tuple(target.shape)}, checkpoint holds "
                f"{tuple(data.shape)}")
        target[...] = data
        seen.add(name)
    if strict:
        extra = set(stored) - seen
        if extra:
            raise CheckpointError(f"checkpoint holds unknown tensors: {sorted(extra)[:5]}")
