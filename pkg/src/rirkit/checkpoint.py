"""Binary checkpoint format.

Layout, all integers little-endian::

    b"RIR1"                       magic
    u8   version                  (1)
    u32  n, n bytes               JSON header: run config + run metadata
    u32  n, n bytes               JSON identity-mask metadata {name: {n_r, k}}
    u32  count                    number of tensor entries
    count x entry:
        u32 name length, name (utf-8)
        u32 ndim, ndim x u32 dims
        prod(dims) x f32 payload  (IEEE-754, little-endian)

JSON is written with sorted keys and no whitespace, so a load/save cycle
reproduces the file byte for byte.
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RIR1"
VERSION = 1
NORM_MEAN = "data.norm_mean"
NORM_STD = "data.norm_std"


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class Checkpoint:
    header: dict
    masks: dict
    tensors: dict = field(default_factory=dict)

    @property
    def config(self):
        return self.header.get("config", {})

    def model_state(self):
        return {k: v for k, v in self.tensors.items() if not k.startswith("data.")}


def from_model(model, config_snapshot, meta=None, norm_stats=None):
    tensors = dict(model.state())
    if norm_stats is not None:
        tensors[NORM_MEAN] = norm_stats.mean
        tensors[NORM_STD] = norm_stats.std
    masks = {name: {"n_r": int(nr), "k": int(k)} for name, (nr, k) in model.masks.items()}
    return Checkpoint({"config": config_snapshot, "meta": meta or {}}, masks, tensors)


def to_bytes(ckpt):
    parts = [MAGIC, struct.pack("<B", VERSION)]
    for obj in (ckpt.header, ckpt.masks):
        blob = _dumps(obj).encode()
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        nb = name.encode()
        arr = np.asarray(arr)
        parts += [struct.pack("<I", len(nb)), nb, struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated while reading {what} "
                              f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def from_bytes(buf):
    rd = _Reader(buf)
    if rd.take(4, "magic") != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version = rd.take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(rd.take(rd.u32("header length"), "header").decode())
    masks = json.loads(rd.take(rd.u32("mask length"), "mask metadata").decode())
    tensors = {}
    for _ in range(rd.u32("entry count")):
        name = rd.take(rd.u32("name length"), "name").decode()
        if name in tensors:
            raise FormatError(f"duplicate tensor entry {name!r}")
        ndim = rd.u32("ndim")
        dims = struct.unpack(f"<{ndim}I", rd.take(4 * ndim, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(rd.take(4 * count, f"payload of {name}"), dtype="<f4")
        tensors[name] = data.astype(np.float32).reshape(dims)
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after the last entry")
    return Checkpoint(header, masks, tensors)


def save(path, ckpt):
    Path(path).write_bytes(to_bytes(ckpt))


def load(path):
    return from_bytes(Path(path).read_bytes())
