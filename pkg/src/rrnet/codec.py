"""Toy intra codec producing (reconstruction, residual) pairs.

Each frame is edge-padded to a multiple of 32, split into 32x32 coding
tree blocks in raster order and each tree into a variance-driven quadtree
of 4..32 transform blocks visited in z-order.  Every block is DC-predicted
from already reconstructed neighbours, its prediction error goes through an
orthonormal DCT, a uniform scalar quantizer with HEVC-like step
``2 ** ((qp - 4) / 6)``, and back.  No deblocking or SAO is applied.

The stored residual is the dequantized, inverse-transformed prediction
error rounded to integers, so ``recon == clip(pred + residual, 0, 255)``
holds on every pixel by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAX_BLOCK = 32
MIN_BLOCK = 4
DEFAULT_VAR_THRESHOLD = 100.0
BLOCK_SIZES = (4, 8, 16, 32)
QP_RANGE = (0, 51)


@dataclass
class Frame:
    """An 8-bit luma plane."""

    plane: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        plane = np.asarray(self.plane)
        if plane.ndim != 2:
            raise ValueError(f"frame plane must be 2-D, got shape {plane.shape}")
        if plane.dtype != np.uint8:
            if plane.size and (plane.min() < 0 or plane.max() > 255):
                raise ValueError("frame samples must lie in [0, 255]")
            plane = plane.astype(np.uint8)
        self.plane = plane

    @property
    def height(self) -> int:
        return self.plane.shape[0]

    @property
    def width(self) -> int:
        return self.plane.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, Frame) and np.array_equal(self.plane, other.plane)


@dataclass(frozen=True)
class Block:
    x: int
    y: int
    size: int


@dataclass
class Partition:
    """Square transform blocks tiling a ``width`` x ``height`` area."""

    blocks: list
    width: int
    height: int

    def coverage(self) -> np.ndarray:
        """Per-pixel count of blocks covering it (all ones for a valid tiling)."""
        count = np.zeros((self.height, self.width), dtype=np.int32)
        for b in self.blocks:
            count[b.y : b.y + b.size, b.x : b.x + b.size] += 1
        return count

    def is_tiling(self) -> bool:
        for b in self.blocks:
            if b.size not in BLOCK_SIZES or b.x % b.size or b.y % b.size:
                return False
        return bool(np.all(self.coverage() == 1))

    def size_histogram(self) -> dict:
        hist = {s: 0 for s in BLOCK_SIZES}
        for b in self.blocks:
            hist[b.size] += 1
        return hist


@dataclass
class CodedTriple:
    """Everything the filter sees about one coded frame, plus the original."""

    original: Frame
    reconstruction: Frame
    residual: np.ndarray  # int16, same dims, in [-255, 255]
    partition: Partition
    qp: int
    rate_proxy: float
    prediction: np.ndarray = field(repr=False, default=None)  # uint8 plane


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def pad_to_multiple(plane: np.ndarray, m: int) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % m, -w % m
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane


# ---------------------------------------------------------------------------
# partitioning


def partition_quadtree(
    frame: Frame,
    max_size: int = MAX_BLOCK,
    min_size: int = MIN_BLOCK,
    var_threshold: float = DEFAULT_VAR_THRESHOLD,
) -> Partition:
    """Split each ``max_size`` tree while block variance exceeds the threshold.

    Variance is the population variance of the block's samples.  Frames not
    divisible by ``max_size`` are edge-replicated first; the partition then
    covers the padded area.  Blocks are listed in coding order.
    """
    if max_size not in BLOCK_SIZES or min_size not in BLOCK_SIZES or min_size > max_size:
        raise ValueError(f"block sizes must be in {BLOCK_SIZES} with min <= max")
    plane = pad_to_multiple(frame.plane, max_size).astype(np.float64)
    h, w = plane.shape
    blocks: list[Block] = []

    def split(x: int, y: int, size: int) -> None:
        if size > min_size and plane[y : y + size, x : x + size].var() > var_threshold:
            half = size // 2
            for dy, dx in ((0, 0), (0, half), (half, 0), (half, half)):
                split(x + dx, y + dy, half)
        else:
            blocks.append(Block(x, y, size))

    for y in range(0, h, max_size):
        for x in range(0, w, max_size):
            split(x, y, max_size)
    return Partition(blocks, w, h)


# ---------------------------------------------------------------------------
# prediction


def dc_predict(size: int, top: np.ndarray | None, left: np.ndarray | None) -> np.ndarray:
    """Flat block at the rounded mean of the available neighbour samples.

    ``top`` is the reconstructed row above the block, ``left`` the column to
    its left; either may be ``None`` at a frame border.  With neither, the
    prediction is mid-gray (128).
    """
    parts = [np.asarray(n, dtype=np.int64).ravel() for n in (top, left) if n is not None]
    if not parts:
        return np.full((size, size), 128, dtype=np.int64)
    samples = np.concatenate(parts)
    dc = int(round_half_away(samples.sum() / samples.size))
    return np.full((size, size), dc, dtype=np.int64)


# ---------------------------------------------------------------------------
# transform and quantization


@lru_cache(maxsize=None)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies."""
    if n not in BLOCK_SIZES:
        raise ValueError(f"unsupported transform size {n}; expected one of {BLOCK_SIZES}")
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct2d(block: np.ndarray) -> np.ndarray:
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 2 or block.shape[0] != block.shape[1]:
        raise ValueError(f"transform block must be square, got {block.shape}")
    c = dct_matrix(block.shape[0])
    return c @ block @ c.T


def idct2d(coefs: np.ndarray) -> np.ndarray:
    coefs = np.asarray(coefs, dtype=np.float64)
    if coefs.ndim != 2 or coefs.shape[0] != coefs.shape[1]:
        raise ValueError(f"transform block must be square, got {coefs.shape}")
    c = dct_matrix(coefs.shape[0])
    return c.T @ coefs @ c


def qstep(qp: int) -> float:
    if not (QP_RANGE[0] <= qp <= QP_RANGE[1]) or int(qp) != qp:
        raise ValueError(f"qp must be an integer in [0, 51], got {qp}")
    return 2.0 ** ((qp - 4) / 6.0)


def quantize(coefs: np.ndarray, qp: int) -> np.ndarray:
    return round_half_away(np.asarray(coefs, dtype=np.float64) / qstep(qp)).astype(np.int64)


def dequantize(qcoefs: np.ndarray, qp: int) -> np.ndarray:
    return np.asarray(qcoefs, dtype=np.float64) * qstep(qp)


# ---------------------------------------------------------------------------
# encoder


def encode_frame(
    frame: Frame,
    qp: int,
    lossless: bool = False,
    var_threshold: float = DEFAULT_VAR_THRESHOLD,
) -> CodedTriple:
    """Code ``frame`` block by block and return the aligned planes.

    ``rate_proxy`` is the sum over blocks and coefficients of
    ``log2(1 + |level|)``; in lossless mode the levels are the rounded
    unquantized coefficients.
    """
    step = qstep(qp)
    partition = partition_quadtree(frame, var_threshold=var_threshold)
    orig = pad_to_multiple(frame.plane, MAX_BLOCK).astype(np.int64)
    ph, pw = orig.shape
    recon = np.zeros((ph, pw), dtype=np.int64)
    pred_plane = np.zeros((ph, pw), dtype=np.int64)
    resid = np.zeros((ph, pw), dtype=np.int64)
    rate = 0.0

    for b in partition.blocks:
        ys, xs = slice(b.y, b.y + b.size), slice(b.x, b.x + b.size)
        top = recon[b.y - 1, xs] if b.y > 0 else None
        left = recon[ys, b.x - 1] if b.x > 0 else None
        pred = dc_predict(b.size, top, left)
        coefs = dct2d(orig[ys, xs] - pred)
        if lossless:
            levels = round_half_away(coefs)
            rec_coefs = coefs
        else:
            levels = round_half_away(coefs / step)
            rec_coefs = levels * step
        rate += float(np.log2(1.0 + np.abs(levels)).sum())
        r = np.clip(round_half_away(idct2d(rec_coefs)).astype(np.int64), -255, 255)
        pred_plane[ys, xs] = pred
        resid[ys, xs] = r
        recon[ys, xs] = np.clip(pred + r, 0, 255)

    h, w = frame.height, frame.width
    return CodedTriple(
        original=Frame(frame.plane.copy()),
        reconstruction=Frame(recon[:h, :w].astype(np.uint8)),
        residual=resid[:h, :w].astype(np.int16),
        partition=partition,
        qp=qp,
        rate_proxy=rate,
        prediction=pred_plane[:h, :w].astype(np.uint8),
    )


def partition_mean_mask(recon: Frame, partition: Partition) -> Frame:
    """Replace every pixel by the rounded mean of its partition block.

    Blocks extending past the frame (from edge padding) are averaged over
    their visible part only.
    """
    plane = recon.plane.astype(np.float64)
    out = np.zeros_like(plane)
    h, w = plane.shape
    for b in partition.blocks:
        if b.y >= h or b.x >= w:
            continue
        ys, xs = slice(b.y, min(b.y + b.size, h)), slice(b.x, min(b.x + b.size, w))
        out[ys, xs] = round_half_away(plane[ys, xs].mean())
    return Frame(out.astype(np.uint8))
