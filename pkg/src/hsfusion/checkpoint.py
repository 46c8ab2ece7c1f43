"""Checkpoint files.

Layout::

    8 bytes   magic  b"HSFCKPT\\0"
    4 bytes   format version, uint32 little-endian
    8 bytes   header length N, uint64 little-endian
    N bytes   UTF-8 JSON header (sorted keys) with a ``blobs`` manifest
    ...       raw little-endian tensor data, in manifest order

Nested state (model and optimizer state dicts) is stored in the header with
each tensor replaced by a ``{"__blob__": name}`` reference. Output depends only
on the saved values, so identical state gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"HSFCKPT\0"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.int32: "<i4",
    torch.uint8: "|u1", torch.bool: "|b1", torch.float16: "<f2",
}


def _encode(obj, prefix: str, blobs: list):
    if torch.is_tensor(obj):
        name = prefix
        blobs.append((name, obj.detach().cpu().contiguous()))
        return {"__blob__": name}
    if isinstance(obj, dict):
        return {"__items__": [[k, _encode(v, f"{prefix}/{k}", blobs)] for k, v in obj.items()]}
    if isinstance(obj, tuple):
        return {"__tuple__": [_encode(v, f"{prefix}/{i}", blobs) for i, v in enumerate(obj)]}
    if isinstance(obj, list):
        return [_encode(v, f"{prefix}/{i}", blobs) for i, v in enumerate(obj)]
    if obj is None or isinstance(obj, (bool, int, float, str)):
        return obj
    raise CheckpointError(f"cannot serialise {type(obj).__name__} at {prefix}")


def _decode(obj, tensors: dict):
    if isinstance(obj, dict):
        if "__blob__" in obj:
            return tensors[obj["__blob__"]]
        if "__items__" in obj:
            return {k: _decode(v, tensors) for k, v in obj["__items__"]}
        if "__tuple__" in obj:
            return tuple(_decode(v, tensors) for v in obj["__tuple__"])
        return {k: _decode(v, tensors) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v, tensors) for v in obj]
    return obj


def save(path, meta: dict, state: dict) -> None:
    """Write ``meta`` (plain JSON values) and ``state`` (nested, may hold tensors)."""
    blobs: list = []
    encoded = _encode(state, "state", blobs)
    manifest, offset = [], 0
    for name, t in blobs:
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        nbytes = t.numel() * t.element_size()
        manifest.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                         "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = json.dumps({"meta": meta, "state": encoded, "blobs": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for (_, t), entry in zip(blobs, manifest):
            arr = t.numpy().astype(np.dtype(entry["dtype"]), copy=False)
            fh.write(arr.tobytes())
    tmp.replace(path)


def load(path):
    """Return ``(meta, state)``; rejects foreign files and other format versions."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
    start = 8 + 12
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    body = start + hlen
    tensors = {}
    for e in header["blobs"]:
        raw = data[body + e["offset"]: body + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return header["meta"], _decode(header["state"], tensors)
