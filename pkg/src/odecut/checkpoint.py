"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"ODECUTCK"
    version      u32
    digest       32 bytes sha256 of the config JSON
    config_len   u32, then config JSON (utf-8)
    meta_len     u32, then metadata JSON (utf-8)
    n_entries    u32
    per entry:   u16 path_len, path (utf-8), u8 dtype code, u8 ndim,
                 ndim x u64 extents, u64 nbytes, raw little-endian data

Writes go to a temporary sibling and are renamed into place.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping

import numpy as np
import torch

MAGIC = b"ODECUTCK"
FORMAT_VERSION = 1

_DTYPES = {
    torch.float32: (1, "<f4"),
    torch.float64: (2, "<f8"),
    torch.int64: (3, "<i8"),
    torch.uint8: (4, "u1"),
    torch.int32: (5, "<i4"),
}
_CODES = {code: (dt, np_dt) for dt, (code, np_dt) in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def config_digest(config_json: str) -> bytes:
    return hashlib.sha256(config_json.encode("utf-8")).digest()


@dataclass
class Checkpoint:
    config: dict
    tensors: "OrderedDict[str, torch.Tensor]"
    meta: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(_dump_json(self.config)).hex()


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    cfg = _dump_json(ckpt.config).encode("utf-8")
    meta = _dump_json(ckpt.meta).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(hashlib.sha256(cfg).digest())
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for path, t in ckpt.tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} at {path!r}")
        code, np_dt = _DTYPES[t.dtype]
        name = path.encode("utf-8")
        raw = t.numpy().astype(np_dt, copy=False).tobytes()
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BB", code, t.dim()))
        for extent in t.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    return buf.getvalue()


def decode(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    digest = bytes(take(32))
    (n,) = struct.unpack("<I", take(4))
    cfg_bytes = bytes(take(n))
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise CheckpointError("config digest mismatch")
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(n)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        path = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODES:
            raise CheckpointError(f"unknown dtype code {code} at {path!r}")
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        (nbytes,) = struct.unpack("<Q", take(8))
        dtype, np_dt = _CODES[code]
        arr = np.frombuffer(bytes(take(nbytes)), dtype=np_dt).reshape(shape)
        tensors[path] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config=json.loads(cfg_bytes.decode("utf-8")), tensors=tensors, meta=meta)


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(encode(ckpt))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def split_prefix(tensors: Mapping[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    return OrderedDict((k[len(prefix):], v) for k, v in tensors.items() if k.startswith(prefix))
