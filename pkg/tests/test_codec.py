import itertools
import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rrnet import corpus
from rrnet.codec import (
    Block,
    Frame,
    Partition,
    dc_predict,
    dct2d,
    dct_matrix,
    dequantize,
    encode_frame,
    idct2d,
    partition_mean_mask,
    partition_quadtree,
    qstep,
    quantize,
    round_half_away,
)

QPS = (22, 27, 32, 37)


def brute_dct(block):
    """Direct O(N^4) orthonormal DCT-II."""
    n = len(block)
    out = [[0.0] * n for _ in range(n)]
    for u in range(n):
        for v in range(n):
            au = math.sqrt(1 / n) if u == 0 else math.sqrt(2 / n)
            av = math.sqrt(1 / n) if v == 0 else math.sqrt(2 / n)
            s = 0.0
            for y in range(n):
                for x in range(n):
                    s += (
                        block[y][x]
                        * math.cos(math.pi * (2 * y + 1) * u / (2 * n))
                        * math.cos(math.pi * (2 * x + 1) * v / (2 * n))
                    )
            out[u][v] = au * av * s
    return np.array(out)


def oracle_quadtree(plane, threshold, x=0, y=0, size=32, min_size=4):
    """Recursive split using a pure-Python population variance."""
    samples = [float(v) for v in plane[y : y + size, x : x + size].ravel()]
    if size > min_size and statistics.pvariance(samples) > threshold:
        h = size // 2
        out = []
        for dy, dx in ((0, 0), (0, h), (h, 0), (h, h)):
            out += oracle_quadtree(plane, threshold, x + dx, y + dy, h, min_size)
        return out
    return [(x, y, size)]


def oracle_partition(plane, threshold):
    blocks = []
    for y in range(0, plane.shape[0], 32):
        for x in range(0, plane.shape[1], 32):
            blocks += oracle_quadtree(plane, threshold, x, y)
    return blocks


# --- transform ---------------------------------------------------------------


def test_constant_8x8_has_only_dc():
    coefs = dct2d(np.full((8, 8), 16.0))
    assert coefs[0, 0] == pytest.approx(128.0, abs=1e-12)
    ac = coefs.copy()
    ac[0, 0] = 0
    assert np.abs(ac).max() < 1e-12
    np.testing.assert_allclose(brute_dct(np.full((8, 8), 16.0)), coefs, atol=1e-12)


def test_zero_block():
    assert not dct2d(np.zeros((4, 4))).any()


@pytest.mark.parametrize("n", [4, 8, 16])
def test_dct_matches_brute_force(n):
    block = np.random.default_rng(n).uniform(-255, 255, (n, n))
    np.testing.assert_allclose(dct2d(block), brute_dct(block.tolist()), atol=1e-9)


def test_random_4x4_round_trip():
    block = np.random.default_rng(4).uniform(-255, 255, (4, 4))
    # inverse of the brute-force forward transform is its transpose
    np.testing.assert_allclose(idct2d(brute_dct(block.tolist())), block, atol=1e-9)
    np.testing.assert_allclose(idct2d(dct2d(block)), block, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([4, 8, 16, 32]), st.integers(0, 2**32 - 1))
def test_parseval_and_inverse(n, seed):
    block = np.random.default_rng(seed).uniform(-255, 255, (n, n))
    coefs = dct2d(block)
    assert abs((block**2).sum() - (coefs**2).sum()) <= 1e-9 * max(1.0, (block**2).sum())
    np.testing.assert_allclose(idct2d(coefs), block, atol=1e-9)


def test_dct_basis_is_orthonormal():
    for n in (4, 8, 16, 32):
        c = dct_matrix(n)
        np.testing.assert_allclose(c @ c.T, np.eye(n), atol=1e-12)


@pytest.mark.parametrize("n", [2, 3, 64])
def test_unsupported_size(n):
    with pytest.raises(ValueError):
        dct2d(np.zeros((n, n)))


# --- quantization -------------------------------------------------------------


def test_step_values():
    assert qstep(4) == 1.0
    assert qstep(22) == 8.0
    assert qstep(28) == 16.0


def test_integers_survive_at_qp4():
    c = np.arange(-20, 21, dtype=np.float64)
    np.testing.assert_array_equal(dequantize(quantize(c, 4), 4), c)


def test_rounding_example():
    assert quantize(np.array([3.9]), 4)[0] == 4
    assert dequantize(np.array([4]), 4)[0] == 4.0


def test_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away([0.5, -0.5, 1.5, -2.5, 2.4]), [1, -1, 2, -3, 2])


@pytest.mark.parametrize("qp", [-1, 52, 3.5])
def test_qp_out_of_range(qp):
    with pytest.raises(ValueError):
        qstep(qp)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (6,), elements=st.floats(-4000, 4000, allow_nan=False)),
    st.integers(0, 51),
)
def test_quantization_error_bounded(coefs, qp):
    err = np.abs(coefs - dequantize(quantize(coefs, qp), qp))
    assert np.all(err <= qstep(qp) / 2 + 1e-9)


# --- partition ----------------------------------------------------------------


def test_constant_frame_uses_largest_blocks():
    p = partition_quadtree(Frame(np.full((64, 96), 77, np.uint8)), var_threshold=0.5)
    assert {b.size for b in p.blocks} == {32}
    assert len(p.blocks) == 6


def test_zero_threshold_splits_fully():
    plane = np.random.default_rng(0).integers(0, 256, (64, 64), dtype=np.uint8)
    p = partition_quadtree(Frame(plane), var_threshold=0.0)
    assert len(p.blocks) == 256 and {b.size for b in p.blocks} == {4}


def test_infinite_threshold():
    plane = np.random.default_rng(0).integers(0, 256, (64, 64), dtype=np.uint8)
    assert len(partition_quadtree(Frame(plane), var_threshold=math.inf).blocks) == 4


def checkerboard(cell):
    yy, xx = np.mgrid[:64, :64]
    return np.where(((yy // cell) + (xx // cell)) % 2 == 0, 40, 200).astype(np.uint8)


@pytest.mark.parametrize("cell", [4, 8, 16])
@pytest.mark.parametrize("threshold", [0.0, 10.0, 5000.0, 7000.0])
def test_checkerboard_matches_recursive_oracle(cell, threshold):
    plane = checkerboard(cell)
    got = [(b.x, b.y, b.size) for b in partition_quadtree(Frame(plane), var_threshold=threshold).blocks]
    assert got == oracle_partition(plane, threshold)


def test_checkerboard_split_depth():
    # every block holding two colours has variance 80**2 = 6400; uniform cells have 0
    p = partition_quadtree(Frame(checkerboard(8)), var_threshold=100.0)
    assert {b.size for b in p.blocks} == {8}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 50.0, 300.0, 2000.0]))
def test_random_frames_match_oracle_and_tile(seed, threshold):
    rng = np.random.default_rng(seed)
    plane = (rng.integers(0, 4, (64, 64)) * rng.integers(1, 60)).astype(np.uint8)
    p = partition_quadtree(Frame(plane), var_threshold=threshold)
    assert [(b.x, b.y, b.size) for b in p.blocks] == oracle_partition(plane, threshold)
    assert p.is_tiling()
    assert p.coverage().sum() == 64 * 64


def test_partition_pads_odd_frames():
    p = partition_quadtree(Frame(np.zeros((40, 70), np.uint8)))
    assert (p.width, p.height) == (96, 64)
    assert p.is_tiling()


def test_overlapping_partition_is_not_a_tiling():
    p = Partition([Block(0, 0, 32), Block(0, 0, 4)], 32, 32)
    assert not p.is_tiling()


# --- prediction ---------------------------------------------------------------


def test_dc_without_neighbours():
    assert np.all(dc_predict(8, None, None) == 128)


def test_dc_examples():
    assert np.all(dc_predict(4, np.full(4, 100), np.full(4, 100)) == 100)
    assert np.all(dc_predict(4, np.full(4, 90), np.full(4, 110)) == 100)
    assert np.all(dc_predict(4, np.full(4, 7), None) == 7)


def test_dc_rounds_half_up_for_positive_means():
    assert dc_predict(4, np.array([1, 2, 1, 2]), None)[0, 0] == 2


def test_top_left_block_predicts_mid_gray():
    triple = encode_frame(list(corpus.test_images().values())[0], 37)
    b = triple.partition.blocks[0]
    assert np.all(triple.prediction[: b.size, : b.size] == 128)


# --- encoder ------------------------------------------------------------------


def clip_identity(triple):
    pred = triple.prediction.astype(np.int64)
    expect = np.clip(pred + triple.residual.astype(np.int64), 0, 255)
    return np.array_equal(expect, triple.reconstruction.plane.astype(np.int64))


@pytest.mark.parametrize("qp", QPS)
def test_reconstruction_identity_on_corpus(qp):
    for frame in corpus.test_images().values():
        triple = encode_frame(frame, qp)
        assert clip_identity(triple)
        assert triple.residual.dtype == np.int16
        assert np.abs(triple.residual).max() <= 255
        assert triple.rate_proxy >= 0


def test_lossless_is_exact():
    for frame in corpus.test_images().values():
        t = encode_frame(frame, 37, lossless=True)
        assert t.reconstruction == frame
        np.testing.assert_array_equal(
            t.residual, frame.plane.astype(np.int16) - t.prediction.astype(np.int16)
        )


@pytest.mark.parametrize("qp", [0, 22, 51])
def test_constant_128_frame(qp):
    frame = Frame(np.full((64, 64), 128, np.uint8))
    t = encode_frame(frame, qp)
    assert t.reconstruction == frame
    assert not t.residual.any()
    assert t.rate_proxy == 0.0
    assert not encode_frame(frame, qp, lossless=True).residual.any()


def test_quality_and_rate_monotone_in_qp():
    for name, frame in corpus.test_images().items():
        triples = [encode_frame(frame, qp) for qp in QPS]
        errs = [np.mean((frame.plane.astype(float) - t.reconstruction.plane) ** 2) for t in triples]
        rates = [t.rate_proxy for t in triples]
        assert all(a < b for a, b in zip(errs, errs[1:])), name
        assert all(a > b for a, b in zip(rates, rates[1:])), name


def test_encode_is_deterministic():
    frame = list(corpus.test_images().values())[1]
    a, b = encode_frame(frame, 32), encode_frame(frame, 32)
    assert a.reconstruction == b.reconstruction
    assert np.array_equal(a.residual, b.residual) and a.rate_proxy == b.rate_proxy


def test_non_multiple_dims_are_cropped_back():
    plane = np.random.default_rng(3).integers(0, 256, (45, 71), dtype=np.uint8)
    t = encode_frame(Frame(plane), 27)
    assert t.reconstruction.plane.shape == (45, 71)
    assert t.residual.shape == (45, 71)
    assert clip_identity(t)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 51))
def test_identity_on_random_frames(seed, qp):
    plane = np.random.default_rng(seed).integers(0, 256, (32, 64), dtype=np.uint8)
    assert clip_identity(encode_frame(Frame(plane), qp))


def test_corpus_partitions_mix_block_sizes():
    sizes = set()
    for frame in corpus.all_images().values():
        p = partition_quadtree(frame)
        assert p.is_tiling()
        sizes |= {s for s, n in p.size_histogram().items() if n}
    assert sizes == {4, 8, 16, 32}


# --- mean mask ----------------------------------------------------------------


def test_mask_of_constant_frame():
    frame = Frame(np.full((32, 32), 9, np.uint8))
    p = partition_quadtree(frame, var_threshold=0.0)
    assert partition_mean_mask(frame, p) == frame


def test_mask_single_block_mean():
    plane = np.arange(32 * 32).reshape(32, 32) % 200
    frame = Frame(plane.astype(np.uint8))
    mask = partition_mean_mask(frame, Partition([Block(0, 0, 32)], 32, 32))
    assert np.all(mask.plane == int(round_half_away(plane.mean())))


def test_mask_is_idempotent():
    frame = list(corpus.test_images().values())[2]
    p = partition_quadtree(frame)
    once = partition_mean_mask(frame, p)
    assert partition_mean_mask(once, p) == once


def test_mask_on_cropped_frame_uses_visible_pixels():
    plane = np.zeros((40, 40), np.uint8)
    plane[32:, :] = 100
    frame = Frame(plane)
    p = Partition([Block(x, y, 32) for y, x in itertools.product((0, 32), (0, 32))], 64, 64)
    mask = partition_mean_mask(frame, p)
    assert np.all(mask.plane[32:, :] == 100) and np.all(mask.plane[:32] == 0)
