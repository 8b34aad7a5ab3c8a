"""Self-describing binary checkpoints.

Layout::

    b"EFCN" | version: u32 LE | header length: u64 LE | UTF-8 JSON header | payload

The header lists every array with dtype, shape, byte offset (relative to
the payload start) and byte length.  Payloads are little-endian float32.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EFCN"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: dict | None = None
    epoch: int = 0
    seeds: dict = field(default_factory=dict)
    optimizer: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        same_head = (self.model, self.epoch, self.seeds, self.optimizer, self.meta) == \
            (other.model, other.epoch, other.seeds, other.optimizer, other.meta)
        if not same_head or self.arrays.keys() != other.arrays.keys():
            return False
        return all(self.arrays[k].shape == other.arrays[k].shape
                   and self.arrays[k].tobytes() == other.arrays[k].tobytes() for k in self.arrays)


def _as_f32(name, a):
    a = np.asarray(a)
    if a.dtype == np.float32:
        return a.astype("<f4", copy=False)
    cast = a.astype("<f4")
    if a.dtype.kind in "iub" and np.array_equal(cast, a):
        return cast
    raise CheckpointError(f"array {name!r} of dtype {a.dtype} cannot be stored losslessly as float32")


def encode(ckpt):
    index = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.arrays):
        a = np.ascontiguousarray(_as_f32(name, ckpt.arrays[name]))
        raw = a.tobytes()
        index[name] = {"dtype": "<f4", "shape": list(a.shape), "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = {"format": "efcn-checkpoint", "version": VERSION, "model": ckpt.model,
              "epoch": ckpt.epoch, "seeds": ckpt.seeds, "optimizer": ckpt.optimizer,
              "meta": ckpt.meta, "arrays": index}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(path, ckpt, overwrite=False):
    data = encode(ckpt)
    with open(path, "wb" if overwrite else "xb") as fh:
        fh.write(data)


def _read_prefix(fh, path):
    prefix = fh.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    head = fh.read(hlen)
    if len(head) != hlen:
        raise CheckpointError(f"{path}: header truncated ({len(head)} of {hlen} bytes)")
    return json.loads(head.decode("utf-8")), _PREFIX.size + hlen


def read_header(path):
    """Header dict (shapes included) without reading any payload bytes."""
    with open(path, "rb") as fh:
        return _read_prefix(fh, path)[0]


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header, start = _read_prefix(fh, path)
        payload = fh.read()
    index = header["arrays"]
    expected = sum(e["length"] for e in index.values())
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload has {len(payload)} bytes, index describes {expected}")
    arrays = {}
    for name, e in index.items():
        if e["dtype"] != "<f4":
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']} for {name!r}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["length"] != 4 * n or e["offset"] + e["length"] > len(payload):
            raise CheckpointError(f"{path}: array {name!r} length disagrees with its shape")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n,
                                     offset=e["offset"]).reshape(e["shape"]).astype(np.float32)
    return Checkpoint(header["model"], header["epoch"], header["seeds"], header["optimizer"],
                      arrays, header.get("meta", {}))


# -- helpers for models and snapshots ----------------------------------------

def from_params(model, theta, epoch=0, seeds=None, optimizer=None, opt_arrays=None, meta=None):
    arrays = {"theta": theta.data}
    for k, v in (opt_arrays or {}).items():
        arrays[f"opt.{k}"] = v
    return Checkpoint(model.to_dict(), int(epoch), dict(seeds or {}), dict(optimizer or {"kind": "none"}),
                      arrays, dict(meta or {}))


def from_snapshot(model, snap, cfg):
    state = snap.opt_state
    opt = {"kind": cfg.optimizer, "lr": cfg.lr, "momentum": cfg.momentum,
           "weight_decay": cfg.weight_decay}
    arrays = {}
    if "t" in state:
        opt["t"] = int(state["t"])
        arrays = {"m": state["m"], "v": state["v"]}
    elif "buf" in state:
        arrays = {"buf": state["buf"]}
    return from_params(model, snap.theta, snap.t_w, {"train_seed": cfg.seed, "rng": snap.rng_state},
                       opt, arrays, {"train_loss": snap.train_loss, "test_accuracy": snap.test_accuracy})


def to_params(ckpt):
    from .nn import ModelSpec, ParamVector

    model = ModelSpec.from_dict(ckpt.model)
    return model, ParamVector(ckpt.arrays["theta"], model.segments())


def to_snapshot(ckpt):
    from .train import Snapshot

    _, theta = to_params(ckpt)
    state = {}
    if "t" in ckpt.optimizer:
        state = {"m": ckpt.arrays["opt.m"], "v": ckpt.arrays["opt.v"], "t": ckpt.optimizer["t"]}
    elif "opt.buf" in ckpt.arrays:
        state = {"buf": ckpt.arrays["opt.buf"]}
    return Snapshot(ckpt.epoch, theta, state, ckpt.seeds["rng"],
                    ckpt.meta.get("train_loss", float("nan")), ckpt.meta.get("test_accuracy", float("nan")))


def save_params(path, model, theta, **kw):
    save_checkpoint(Path(path), from_params(model, theta, **kw))
