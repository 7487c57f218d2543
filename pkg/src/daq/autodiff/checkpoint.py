"""Checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"DAQCKPT\\0"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header
    ...       raw tensor data, concatenated in header order

Header keys: ``format_version``, ``seed``, ``epoch``, ``tensors`` (list of
``{name, shape, dtype, offset, nbytes}``, offsets relative to the end of the
header, dtype as a little-endian numpy code such as ``"<f8"``),
``quantizers`` (list of ``{layer, role, lower, upper, scale, lower_trainable,
bits, kind}``) and a free-form ``meta`` object (the run configuration).
Floats in the header are written with ``repr`` precision, so they round-trip
exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DAQCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    seed: int
    epoch: int
    tensors: dict[str, np.ndarray]
    quantizers: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    records = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes(order="C")
        records.append(
            {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "seed": int(ckpt.seed),
        "epoch": int(ckpt.epoch),
        "tensors": records,
        "quantizers": ckpt.quantizers,
        "meta": ckpt.meta,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, head_len = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    body_start = 16 + head_len
    if len(raw) < body_start:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(raw[16:body_start].decode("utf-8"))
    tensors = {}
    for rec in header["tensors"]:
        start = body_start + rec["offset"]
        end = start + rec["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: tensor {rec['name']} truncated")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(
        seed=header["seed"],
        epoch=header["epoch"],
        tensors=tensors,
        quantizers=header["quantizers"],
        meta=header["meta"],
        format_version=version,
    )
