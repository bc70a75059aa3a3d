import io
import os
import json
import struct
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Dict

import numpy as np
import torch

from ..model.sparse import MaskedTensor
from ..model.hashed import HashedTensor

MAGIC = b"SPTRCKPT"
VERSION = 1

KIND_DENSE = 0
KIND_MASKED = 1
KIND_HASHED = 2


class CheckpointError(ValueError):
    pass


@dataclass(repr=False, eq=False)
class Checkpoint:
    meta: Dict[str, Any] = field(default_factory=dict)
    params: list = field(default_factory=list)
    aux: Dict[str, torch.Tensor] = field(default_factory=dict)
    rng: Dict[str, bytes] = field(default_factory=dict)


class _Reader:
    def __init__(self, f: BinaryIO, path: str):
        self.f = f
        self.path = path

    def take(self, n: int) -> bytes:
        b = self.f.read(n)
        if len(b) != n:
            raise CheckpointError(f"{self.path}: truncated, wanted {n} bytes, got {len(b)}")
        return b

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))

    def f64(self, n: int) -> torch.Tensor:
        return torch.from_numpy(np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64))

    def shape(self) -> tuple:
        (ndim,) = self.unpack("B")
        return tuple(self.unpack("I" * ndim)) if ndim else ()


def _write_shape(f: BinaryIO, shape):
    f.write(struct.pack("<B", len(shape)))
    if shape:
        f.write(struct.pack("<" + "I" * len(shape), *shape))


def _write_f64(f: BinaryIO, t: torch.Tensor):
    f.write(t.detach().to(torch.float64).contiguous().numpy().astype("<f8").tobytes())


def _write_tensor(f: BinaryIO, p):
    if isinstance(p, MaskedTensor):
        f.write(struct.pack("<B", KIND_MASKED))
        _write_shape(f, p.dense_shape)
        bits = np.packbits(p.mask.view(-1).numpy().astype(np.uint8), bitorder="little")
        f.write(bits.tobytes())
        flat = p.values.view(-1)[p.mask.view(-1)]
        f.write(struct.pack("<Q", flat.numel()))
        _write_f64(f, flat)
    elif isinstance(p, HashedTensor):
        f.write(struct.pack("<B", KIND_HASHED))
        _write_shape(f, p.dense_shape)
        f.write(struct.pack("<Q", p.unique))
        f.write(p.index.numpy().astype("<i8").tobytes())
        _write_f64(f, p.phi)
    else:
        f.write(struct.pack("<B", KIND_DENSE))
        _write_shape(f, tuple(p.shape))
        _write_f64(f, p.reshape(-1))


def _read_tensor(r: _Reader):
    (kind,) = r.unpack("B")
    shape = r.shape()
    n = 1
    for d in shape:
        n *= d
    if kind == KIND_MASKED:
        bits = np.frombuffer(r.take((n + 7) // 8), dtype=np.uint8)
        mask = torch.from_numpy(np.unpackbits(bits, count=n, bitorder="little").astype(bool)).view(shape)
        (m,) = r.unpack("Q")
        if m != int(mask.sum()):
            raise CheckpointError(f"{r.path}: mask has {int(mask.sum())} active bits, record says {m}")
        values = torch.zeros(n, dtype=torch.float64)
        values[mask.view(-1)] = r.f64(m)
        return MaskedTensor(values.view(shape), mask)
    if kind == KIND_HASHED:
        (m,) = r.unpack("Q")
        index = torch.from_numpy(np.frombuffer(r.take(8 * n), dtype="<i8").astype(np.int64))
        phi = r.f64(m)
        return HashedTensor(phi, index, shape)
    if kind == KIND_DENSE:
        return r.f64(n).view(shape)
    raise CheckpointError(f"{r.path}: unknown tensor kind {kind}")


def dump(ckpt: Checkpoint, f: BinaryIO):
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf8")
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(meta)))
    f.write(meta)
    f.write(struct.pack("<I", len(ckpt.params)))
    for p in ckpt.params:
        _write_tensor(f, p)
    f.write(struct.pack("<I", len(ckpt.aux)))
    for name, t in ckpt.aux.items():
        raw = name.encode("utf8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        _write_tensor(f, t)
    f.write(struct.pack("<I", len(ckpt.rng)))
    for name, state in ckpt.rng.items():
        raw = name.encode("utf8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<I", len(state)))
        f.write(state)


def load(f: BinaryIO, path: str = "<stream>") -> Checkpoint:
    r = _Reader(f, path)
    magic = f.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    version, meta_len = r.unpack("II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata: {e}") from e
    ckpt = Checkpoint(meta=meta)
    (count,) = r.unpack("I")
    ckpt.params = [_read_tensor(r) for _ in range(count)]
    (count,) = r.unpack("I")
    for _ in range(count):
        (ln,) = r.unpack("H")
        name = r.take(ln).decode("utf8")
        ckpt.aux[name] = _read_tensor(r)
    (count,) = r.unpack("I")
    for _ in range(count):
        (ln,) = r.unpack("H")
        name = r.take(ln).decode("utf8")
        (sl,) = r.unpack("I")
        ckpt.rng[name] = r.take(sl)
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str):
    """Write `ckpt` little-endian; the file appears atomically."""
    buf = io.BytesIO()
    dump(ckpt, buf)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return load(f, path)
