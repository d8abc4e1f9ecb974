"""Binary checkpoint files.

Layout: the 8 magic bytes ``MANETPP1``, a little-endian uint64 giving the
manifest length, the manifest itself (UTF-8 JSON listing name, shape,
dtype and byte offset of every tensor plus the network config), then the
raw little-endian tensor payloads back to back.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .adapters import Manet, NetConfig, new_instance_head

MAGIC = b"MANETPP1"


class CheckpointError(ValueError):
    pass


def _config_dict(cfg: NetConfig):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(cfg).items()}


def _config_from_dict(d):
    fields = {f.name for f in dataclasses.fields(NetConfig)}
    unknown = set(d) - fields
    if unknown:
        raise CheckpointError(f"unknown config keys in checkpoint: {sorted(unknown)}")
    return NetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def model_tensors(model: Manet):
    out = {name: p.value for name, p in model.named_params().items()}
    out.update(model.buffers())
    return out


def to_bytes(model: Manet, extra: dict | None = None) -> bytes:
    tensors = model_tensors(model)
    entries, payload, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    manifest = {"config": _config_dict(model.cfg), "n_branches": len(model.ia.instance),
                "dtype": model.dtype.str, "tensors": entries, "extra": extra or {}}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(payload)


def save(model: Manet, path, extra: dict | None = None):
    Path(path).write_bytes(to_bytes(model, extra))


def from_bytes(data: bytes):
    """Returns (model, extra)."""
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16 : 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    base = 16 + n
    cfg = _config_from_dict(manifest["config"])
    model = Manet(cfg, n_branches=0, seed=0, dtype=np.dtype(manifest["dtype"]))
    rng = np.random.default_rng(0)
    for _ in range(manifest["n_branches"]):
        new_instance_head(model.ia, rng)
    params = model.named_params()
    buffers = model.buffers()
    seen = set()
    for e in manifest["tensors"]:
        start = base + e["offset"]
        raw = data[start : start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        if e["name"] in params:
            target = params[e["name"]].value
        elif e["name"] in buffers:
            target = buffers[e["name"]]
        else:
            raise CheckpointError(f"unexpected tensor {e['name']}")
        if target.shape != arr.shape:
            raise CheckpointError(f"{e['name']}: shape {arr.shape} != expected {target.shape}")
        target[...] = arr
        seen.add(e["name"])
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
    return model, manifest.get("extra", {})


def load(path):
    return from_bytes(Path(path).read_bytes())
