"""RRNW weights files.

Layout (all little-endian)::

    magic        4s   b"RRNW"
    version      u32  1
    variant      u32  Variant id
    qp_tag       u32
    stem         u32  stem_channels
    block        u32  block_channels
    edsr         u32  edsr_channels
    count        u32  number of parameter records
    then per parameter:
      name_len   u32, name bytes (UTF-8)
      rank       u32, dims u32 * rank
      dtype tag  u8   (1 = float32, 2 = float64)
      data       raw little-endian scalars, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .formats import FormatError, atomic_write
from .model import FilterModel, ModelConfig, Variant, build_model

MAGIC = b"RRNW"
VERSION = 1
_HEADER = struct.Struct("<4s7I")
_U32 = struct.Struct("<I")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class WeightsFormatError(FormatError):
    """Bad magic, unsupported version, truncation or shape/config mismatch."""


def dumps(model: FilterModel) -> bytes:
    cfg = model.config
    parts = [
        _HEADER.pack(
            MAGIC,
            VERSION,
            int(cfg.variant),
            cfg.qp_tag,
            cfg.stem_channels,
            cfg.block_channels,
            cfg.edsr_channels,
            len(model.params),
        )
    ]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)) + raw)
        parts.append(_U32.pack(p.data.ndim) + b"".join(_U32.pack(d) for d in p.data.shape))
        tag = _TAGS[p.data.dtype]
        parts.append(bytes([tag]) + p.data.astype(_DTYPES[tag], copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise WeightsFormatError(
                f"truncated weights file: needed {n} bytes at offset {self.pos}, "
                f"{len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def loads(data: bytes) -> FilterModel:
    r = _Reader(data)
    magic, version, variant, qp, stem, block, edsr, count = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise WeightsFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise WeightsFormatError(f"unsupported weights format version {version}")
    try:
        config = ModelConfig(Variant(variant), stem, block, edsr, qp)
    except ValueError as exc:
        raise WeightsFormatError(f"invalid model config in header: {exc}") from None

    arrays = {}
    dtype = None
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        tag = r.take(1)[0]
        if tag not in _DTYPES:
            raise WeightsFormatError(f"unknown scalar type tag {tag} for {name!r}")
        dt = _DTYPES[tag]
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape)
        dtype = dt if dtype is None else dtype
    if r.pos != len(data):
        raise WeightsFormatError(f"{len(data) - r.pos} trailing bytes after parameter table")

    model = build_model(config, seed=0, dtype=(dtype or np.float32).newbyteorder("="))
    expected = {n: p.shape for n, p in model.params.items()}
    got = {n: a.shape for n, a in arrays.items()}
    if list(expected) != list(got) or expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(n for n in set(expected) & set(got) if expected[n] != got[n])
        raise WeightsFormatError(
            f"parameters do not match {config.variant.name} config: "
            f"missing={missing} unexpected={extra} wrong_shape={wrong}"
        )
    for name, arr in arrays.items():
        model.params[name].data = np.array(arr, dtype=arr.dtype.newbyteorder("="))
    return model


def save_weights(model: FilterModel, path) -> None:
    atomic_write(path, dumps(model))


def load_weights(path) -> FilterModel:
    return loads(Path(path).read_bytes())
