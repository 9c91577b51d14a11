"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    0      8 bytes   magic b"MARSCFCK"
    8      u32       format version (currently 1)
    12     u32       header length L
    16     L bytes   UTF-8 JSON header (sorted keys, no whitespace)
    16+L   ...       tensor payload, each entry's raw bytes back to back
    end-32 32 bytes  SHA-256 of every preceding byte

The header lists every stored array with its section (``param``, ``buffer``,
``adamax_m``, ``adamax_u``), name, dtype string, shape, byte offset into the
payload and byte length. It also carries the model config, ActNorm
initialization flags, optional optimizer scalars and free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import MARSCF, FlowConfig
from .optim import Adamax, AdamaxMoments

MAGIC = b"MARSCFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: MARSCF
    moments: AdamaxMoments | None = None
    optimizer: dict | None = None
    meta: dict = field(default_factory=dict)


def _entries(model: MARSCF, optimizer: Adamax | None):
    for name, p in model.named_parameters():
        yield "param", name, p.data
    for name, b in model.named_buffers():
        yield "buffer", name, b
    if optimizer is not None:
        names = [n for n, _ in model.named_parameters()]
        for name, m, u in zip(names, optimizer.moments.m, optimizer.moments.u):
            yield "adamax_m", name, m
            yield "adamax_u", name, u


def to_bytes(model: MARSCF, optimizer: Adamax | None = None, meta: dict | None = None) -> bytes:
    tensors, chunks, offset = [], [], 0
    for section, name, arr in _entries(model, optimizer):
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
        blob = arr.astype(dt, copy=False).tobytes()
        tensors.append({"section": section, "name": name, "dtype": dt.str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "config": model.config.to_dict(),
        "dtype": model.dtype.str,
        "actnorm_initialized": {name: bool(m.initialized) for name, m in model.actnorms()},
        "optimizer": None if optimizer is None else {
            "step": optimizer.moments.step, "lr": optimizer.lr, "beta1": optimizer.beta1,
            "beta2": optimizer.beta2, "eps": optimizer.eps},
        "tensors": tensors,
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(head)) + head + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, model: MARSCF, optimizer: Adamax | None = None, meta: dict | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(model, optimizer, meta))
    tmp.replace(path)


def from_bytes(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < 16 + 32 or raw[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch")
    version, head_len = struct.unpack("<II", body[8:16])
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    header = json.loads(body[16:16 + head_len].decode("utf-8"))
    payload = body[16 + head_len:]

    config = FlowConfig(**header["config"])
    model = MARSCF(config, identity_init=True, dtype=np.dtype(header["dtype"]))
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    moments_m, moments_u = {}, {}
    for entry in header["tensors"]:
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        section, name = entry["section"], entry["name"]
        if section == "param":
            target = params.get(name)
            if target is None or target.shape != arr.shape:
                raise CheckpointError(f"{source}: parameter {name} does not fit the model")
            target.data[...] = arr
        elif section == "buffer":
            target = buffers.get(name)
            if target is None or target.shape != arr.shape:
                raise CheckpointError(f"{source}: buffer {name} does not fit the model")
            target[...] = arr
        elif section == "adamax_m":
            moments_m[name] = arr.copy()
        elif section == "adamax_u":
            moments_u[name] = arr.copy()
        else:
            raise CheckpointError(f"{source}: unknown section {section!r}")
    for name, mod in model.actnorms():
        mod.initialized = bool(header["actnorm_initialized"][name])

    moments = None
    if header["optimizer"] is not None:
        names = list(params)
        moments = AdamaxMoments([moments_m[n] for n in names], [moments_u[n] for n in names],
                                step=header["optimizer"]["step"])
    return Checkpoint(model=model, moments=moments, optimizer=header["optimizer"], meta=header["meta"])


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    return from_bytes(path.read_bytes(), str(path))
