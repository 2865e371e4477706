"""On-disk formats for frames, residual planes and partitions.

* frames: binary PGM (``P5``), 8-bit.
* residuals: ``RESI`` files, a 16-byte header (magic, width and height as
  little-endian u32, 4 reserved zero bytes) followed by row-major
  little-endian int16 samples.
* partitions: text, one ``x y size`` block per line after a
  ``width height`` header line.

Writes go through a temporary file and ``os.replace`` so readers never see
a partial file.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .codec import Block, Frame, Partition

RESI_MAGIC = b"RESI"
RESI_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file does not follow the expected binary or text layout."""


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PGM


def encode_pgm(plane: np.ndarray) -> bytes:
    plane = np.asarray(plane)
    if plane.ndim != 2 or plane.dtype != np.uint8:
        raise ValueError("PGM output needs a 2-D uint8 plane")
    h, w = plane.shape
    return b"P5\n%d %d\n255\n" % (w, h) + plane.tobytes()


def write_pgm(path, frame: Frame | np.ndarray) -> None:
    plane = frame.plane if isinstance(frame, Frame) else frame
    atomic_write(path, encode_pgm(plane))


def _pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        try:
            tokens.append(int(data[start:pos]))
        except ValueError:
            raise FormatError(f"bad PGM header token {data[start:pos]!r}") from None
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pgm(data: bytes) -> Frame:
    if data[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)")
    (w, h, maxval), offset = _pgm_tokens(data[2:], 3)
    offset += 2
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM is supported (maxval {maxval})")
    raster = data[offset : offset + w * h]
    if len(raster) != w * h:
        raise FormatError(f"truncated PGM raster: {len(raster)} of {w * h} bytes")
    return Frame(np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy())


def read_pgm(path) -> Frame:
    return decode_pgm(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# RESI


def encode_resi(residual: np.ndarray) -> bytes:
    residual = np.asarray(residual)
    if residual.ndim != 2:
        raise ValueError("residual plane must be 2-D")
    if residual.size and (residual.min() < -32768 or residual.max() > 32767):
        raise ValueError("residual does not fit int16")
    h, w = residual.shape
    return RESI_HEADER.pack(RESI_MAGIC, w, h, 0) + residual.astype("<i2").tobytes()


def decode_resi(data: bytes) -> np.ndarray:
    if len(data) < RESI_HEADER.size:
        raise FormatError("truncated RESI header")
    magic, w, h, _ = RESI_HEADER.unpack_from(data)
    if magic != RESI_MAGIC:
        raise FormatError(f"bad RESI magic {magic!r}")
    body = data[RESI_HEADER.size :]
    if len(body) != 2 * w * h:
        raise FormatError(f"RESI payload is {len(body)} bytes, expected {2 * w * h}")
    return np.frombuffer(body, dtype="<i2").reshape(h, w).astype(np.int16)


def write_resi(path, residual: np.ndarray) -> None:
    atomic_write(path, encode_resi(residual))


def read_resi(path) -> np.ndarray:
    return decode_resi(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# partition text


def encode_partition(partition: Partition) -> bytes:
    lines = [f"{partition.width} {partition.height}"]
    lines += [f"{b.x} {b.y} {b.size}" for b in partition.blocks]
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_partition(path, partition: Partition) -> None:
    atomic_write(path, encode_partition(partition))


def read_partition(path) -> Partition:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    try:
        w, h = map(int, lines[0].split())
        blocks = [Block(*map(int, ln.split())) for ln in lines[1:] if ln.strip()]
    except (ValueError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed partition file {path}: {exc}") from None
    return Partition(blocks, w, h)
