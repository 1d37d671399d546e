"""NTAR1 tensor archive.

Layout (all integers little-endian)::

    b"NTAR1"
    u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u8 dtype (0 = f32), u32 rank, u64 dim * rank,
                raw row-major f32 payload
    u32 meta_len, meta (UTF-8 "key=value" lines)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

MAGIC = b"NTAR1"
DTYPE_F32 = 0


class ArchiveError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)


def save_archive(path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    out = bytearray(MAGIC)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")   # tobytes() is row-major regardless of layout
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<BI", DTYPE_F32, a.ndim)
        out += struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes()
    lines = []
    for k, v in (metadata or {}).items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ArchiveError(f"metadata entry {k!r} cannot be stored as a key=value line")
        lines.append(f"{k}={v}\n")
    meta = "".join(lines).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveError(f"{self.path}: truncated archive")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_archive(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise ArchiveError(f"{path}: bad magic, not an NTAR1 archive")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        dtype, rank = r.unpack("<BI")
        if dtype != DTYPE_F32:
            raise ArchiveError(f"{path}: tensor {name!r} has unknown dtype code {dtype}")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    (mlen,) = r.unpack("<I")
    meta = {}
    for line in r.take(mlen).decode("utf-8").splitlines():
        if line:
            k, _, v = line.partition("=")
            meta[k] = v
    if r.pos != len(buf):
        raise ArchiveError(f"{path}: {len(buf) - r.pos} trailing bytes after metadata")
    return Checkpoint(tensors, meta)


# -- dataclass <-> metadata ---------------------------------------------------

def encode_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if hasattr(v, "value"):
        return str(v.value)
    return str(v)


def decode_value(text: str, like):
    if isinstance(like, bool):
        if text.lower() not in ("true", "false", "on", "off", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "on", "1", "yes")
    if isinstance(like, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    if hasattr(like, "value"):
        return type(like)(text)
    return type(like)(text)


def config_to_meta(cfg, prefix: str) -> dict[str, str]:
    return {f"{prefix}{f.name}": encode_value(getattr(cfg, f.name)) for f in fields(cfg)}


def config_from_meta(cls, meta: dict[str, str], prefix: str):
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        key = prefix + f.name
        if key in meta:
            kwargs[f.name] = decode_value(meta[key], getattr(defaults, f.name))
    return cls(**kwargs)
