"""Flat named-tensor checkpoint archive.

Layout (all integers little-endian)::

    b"MVCK"                 magic
    uint32                  format version (1)
    uint64                  manifest length in bytes
    manifest                UTF-8 JSON
    data                    concatenated raw little-endian tensor bytes

The manifest holds ``config`` (the full run configuration), ``meta`` (free-form,
e.g. training mode and step count) and ``tensors``: a list of
``{"name", "dtype", "shape", "offset", "nbytes"}`` with offsets relative to the
start of the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MVCK"
VERSION = 1
_DTYPES = {"float32", "float64", "int64", "int32", "uint8", "bool"}


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors: dict, config: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps({"config": config, "meta": meta or {}, "tensors": entries}).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple[dict, dict, dict]:
    """Returns ``(tensors, config, meta)``."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    version, mlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    manifest = json.loads(data[16 : 16 + mlen])
    base = 16 + mlen
    tensors = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(data[start : start + e["nbytes"]], dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        tensors[e["name"]] = torch.from_numpy(arr.astype(e["dtype"]).reshape(e["shape"]).copy())
    return tensors, manifest["config"], manifest["meta"]
