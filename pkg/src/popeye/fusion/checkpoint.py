"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0-7    magic  b"PPYCKPT\\0"
    bytes 8-11   uint32 format version (currently 1)
    bytes 12-19  uint64 header length N
    next N bytes UTF-8 JSON header:
                   {"config": {...}, "stage": str, "meta": {...},
                    "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    rest         raw tensor data; offsets are relative to the end of the header
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import PopeyeToy, ToyModelConfig

MAGIC = b"PPYCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: PopeyeToy, path, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype("<f8"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": "<f8", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"config": model.config.to_dict(), "stage": model.stage, "meta": meta or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_header(path) -> dict:
    with Path(path).open("rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        return json.loads(fh.read(hlen).decode("utf-8"))


def load_checkpoint(path) -> PopeyeToy:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
    data = memoryview(raw)[20 + hlen :]
    model = PopeyeToy(ToyModelConfig.from_dict(header["config"]))
    stage = header["stage"]
    model.set_stage(stage)
    state = {}
    for e in header["tensors"]:
        chunk = data[e["offset"] : e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype=e["dtype"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float64))
    model.load_state_dict(state, strict=True)
    model.set_stage(stage)
    return model
