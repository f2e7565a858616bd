"""Versioned binary parameter container.

Layout: magic b"XRQC", uint32 version, uint64 manifest length, UTF-8 JSON
manifest, then the raw tensor payload. Every tensor is stored as
little-endian float64 in manifest order; the manifest records the model
config plus each entry's name, shape, and byte offset into the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import ModelConfig, ModelParams, init_params

MAGIC = b"XRQC"
VERSION = 1


def save_params(params: ModelParams, path: str | Path) -> None:
    entries = []
    blobs = []
    offset = 0
    for kind, table in (("tensor", params.tensors), ("stat", params.stats)):
        for name in table:
            arr = table[name].data if kind == "tensor" else table[name]
            arr = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"kind": kind, "name": name,
                            "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    manifest = json.dumps({"config": params.config.to_dict(),
                           "entries": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"not a parameter container: bad magic {raw[:4]!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    mlen = struct.unpack("<Q", raw[8:16])[0]
    manifest = json.loads(raw[16:16 + mlen].decode("utf-8"))
    payload = raw[16 + mlen:]
    config = ModelConfig.from_dict(manifest["config"])
    params = init_params(config, seed=0)
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start)
        arr = arr.reshape(shape).astype(np.float64)
        if entry["kind"] == "tensor":
            if entry["name"] not in params.tensors:
                raise ValueError(f"unknown tensor {entry['name']!r} in container")
            params.tensors[entry["name"]].data = arr
        else:
            params.stats[entry["name"]] = arr
    return params
