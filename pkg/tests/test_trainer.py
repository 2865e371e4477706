import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rrnet.codec import Frame
from rrnet.formats import read_pgm, read_resi
from rrnet.model import ModelConfig, Variant, build_model
from rrnet.trainer import (
    AdamState,
    DatasetManifest,
    LRSchedule,
    _epoch_batches,
    adam_step,
    build_dataset,
    evaluate_loss,
    fine_tune,
    load_patches,
    normalize_planes,
    train,
)


def noise_image(seed, h=128, w=128):
    # smooth ramp plus noise: compresses to a mixed partition
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:h, :w]
    plane = 60 + 0.5 * xx + 0.4 * yy + rng.normal(0, 12, (h, w))
    return Frame(np.clip(plane, 0, 255).astype(np.uint8))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    return build_dataset({"a": noise_image(0), "b": noise_image(1)}, [37], root)


@pytest.fixture(scope="module")
def patches(dataset):
    return load_patches(dataset)


# --- dataset ------------------------------------------------------------------


def test_one_image_gives_four_patches(tmp_path):
    m = build_dataset([noise_image(2)], [37], tmp_path)
    assert len(m) == 4
    assert sorted(r.origin for r in m.records) == [(0, 0), (0, 64), (64, 0), (64, 64)]


def test_record_count_product_law(tmp_path):
    m = build_dataset([noise_image(3), noise_image(4)], [22, 37], tmp_path)
    assert len(m) == 2 * 4 * 2
    assert m.qps == {22, 37}
    assert len(m.subset(22)) == 8


def test_stride_controls_overlap(tmp_path):
    assert len(build_dataset([noise_image(5)], [37], tmp_path, stride=32)) == 9


def test_small_images_are_skipped(tmp_path):
    m = build_dataset([noise_image(6, 32, 200), noise_image(7)], [37], tmp_path)
    assert m.skipped == 1 and len(m) == 4


@pytest.mark.parametrize("kwargs", [{"images": []}, {"qps": []}])
def test_dataset_needs_inputs(tmp_path, kwargs):
    args = {"images": [noise_image(0)], "qps": [37], **kwargs}
    with pytest.raises(ValueError):
        build_dataset(args["images"], args["qps"], tmp_path)


def test_every_record_satisfies_codec_identity(dataset):
    for r in dataset.records:
        x, y = r.origin
        win = (slice(y, y + 64), slice(x, x + 64))
        recon = read_pgm(dataset.root / r.reconstruction_path).plane[win].astype(np.int64)
        resid = read_resi(dataset.root / r.residual_path)[win].astype(np.int64)
        orig = read_pgm(dataset.root / r.original_path).plane[win]
        assert recon.shape == resid.shape == orig.shape == (64, 64)
        # the prediction is recoverable where no clipping happened; recon - resid must be a valid sample
        pred = recon - resid
        unclipped = (recon > 0) & (recon < 255)
        assert np.all((pred[unclipped] >= 0) & (pred[unclipped] <= 255))
        assert np.array_equal(np.clip(pred + resid, 0, 255), recon)


def test_patches_are_normalized_and_aligned(dataset, patches):
    assert len(patches) == len(dataset) == 8
    r = dataset.records[5]
    x, y = r.origin
    orig = read_pgm(dataset.root / r.original_path).plane[y : y + 64, x : x + 64]
    np.testing.assert_array_equal(patches.label[5, 0], orig.astype(np.float32) / 255)
    assert patches.recon.dtype == np.float32
    assert patches.recon.min() >= 0 and patches.recon.max() <= 1
    assert patches.residual.min() >= -1 and patches.residual.max() <= 1


def test_normalize_planes_scales():
    p = normalize_planes(np.array([[255]]), np.array([[-255]]))
    assert p["recon"][0, 0] == 1.0 and p["residual"][0, 0] == -1.0


# --- optimizer ----------------------------------------------------------------


def tiny_model():
    return build_model(ModelConfig(Variant.RECON_ONLY_EDSR, edsr_channels=2), dtype=np.float64)


def set_grads(model, fill):
    for p in model.parameters():
        p.grad = np.full(p.shape, fill, dtype=p.dtype)


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_first_adam_step_closed_form(g):
    model = tiny_model()
    before = {n: p.data.copy() for n, p in model.params.items()}
    set_grads(model, g)
    adam_step(model, AdamState(weight_decay=0.0), lr=1e-4)
    # m_hat = g, v_hat = g^2 on the first step
    expected = 1e-4 * g / (abs(g) + 1e-8)
    for n, p in model.params.items():
        delta = p.data - before[n]
        np.testing.assert_allclose(delta, -expected, rtol=1e-9)
        assert np.all(np.sign(delta) == -np.sign(g))


def test_zero_gradient_is_noop():
    model = tiny_model()
    before = [p.data.copy() for p in model.parameters()]
    set_grads(model, 0.0)
    state = AdamState(weight_decay=0.0)
    for _ in range(3):
        adam_step(model, state, 1e-4)
    assert all(np.array_equal(a, p.data) for a, p in zip(before, model.parameters()))
    assert state.t == 3


def test_decoupled_decay_law():
    model = tiny_model()
    before = [p.data.copy() for p in model.parameters()]
    set_grads(model, 0.0)
    state = AdamState(weight_decay=1e-4)
    adam_step(model, state, 1e-4)
    adam_step(model, state, 1e-4)
    for a, p in zip(before, model.parameters()):
        np.testing.assert_allclose(p.data, a * (1 - 1e-8) ** 2, rtol=0, atol=1e-15)


def test_missing_gradient_is_named():
    model = tiny_model()
    set_grads(model, 1.0)
    model.params["rec.conv8.bias"].grad = None
    with pytest.raises(ValueError, match="rec.conv8.bias"):
        adam_step(model, AdamState(), 1e-4)


def test_moment_buffers_mirror_parameters():
    model = tiny_model()
    set_grads(model, 0.5)
    state = AdamState()
    adam_step(model, state, 1e-4)
    assert all(state.m[n].shape == p.shape == state.v[n].shape for n, p in model.params.items())


# --- schedule and shuffling ------------------------------------------------------------


def test_full_schedule():
    s = LRSchedule()
    assert (s.base, s.gamma, s.interval, s.total_epochs) == (1e-4, 0.1, 100, 120)
    for epoch in (0, 50, 99, 100, 119):
        assert s.lr(epoch) == 1e-4 * 0.1 ** (epoch // 100)
    assert s.lr(99) == 1e-4 and s.lr(100) == pytest.approx(1e-5, rel=1e-12)


def test_schedule_scaled_to_short_runs():
    assert LRSchedule().scaled_to(60).interval == 50
    assert LRSchedule().scaled_to(5).interval == 4
    assert LRSchedule().scaled_to(200).interval == 100


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(1, 17), st.integers(0, 2**32 - 1))
def test_shuffle_is_a_permutation(n, batch, seed):
    batches = _epoch_batches(np.random.default_rng(seed), n, batch)
    assert all(len(b) == batch for b in batches)
    assert len(batches) == n // batch
    seen = np.concatenate(batches) if batches else np.array([], int)
    assert len(set(seen.tolist())) == len(seen)
    if n % batch == 0:
        assert sorted(seen.tolist()) == list(range(n))


# --- training loop ----------------------------------------------------------------


SMALL = ModelConfig(Variant.RECON_ONLY_EDSR, edsr_channels=8)


def test_history_length_and_determinism(dataset, patches):
    a = train(SMALL, dataset, 3, batch=4, seed=5, data=patches)
    b = train(SMALL, dataset, 3, batch=4, seed=5, data=patches)
    assert len(a.history) == 3 and a.steps == 3 * 2
    assert a.history == b.history
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.model.parameters(), b.model.parameters()))


def test_train_rejects_qp_mismatch_and_empty(dataset):
    with pytest.raises(ValueError, match="qp"):
        train(SMALL.with_qp(22), dataset, 1)
    with pytest.raises(ValueError, match="empty"):
        train(SMALL, DatasetManifest([], dataset.root), 1)


def test_fine_tune_zero_epochs_copies_base(dataset, tmp_path):
    base = build_model(SMALL, seed=1)
    m22 = build_dataset({"a": noise_image(0)}, [22], tmp_path)
    out = fine_tune(base, m22, epochs=0)
    assert out.model.config.qp_tag == 22
    assert base.config.qp_tag == 37
    assert all(np.array_equal(p.data, q.data) for p, q in zip(base.parameters(), out.model.parameters()))
    assert out.model.params["fuse.conv.weight"] is not base.params["fuse.conv.weight"]


def test_fine_tune_tags_and_trains(tmp_path):
    base = build_model(SMALL, seed=1)
    m22 = build_dataset({"a": noise_image(0)}, [22], tmp_path)
    out = fine_tune(base, m22, epochs=2, batch=2)
    assert out.model.config.qp_tag == 22 and len(out.history) == 2 and out.steps == 4
    assert not np.array_equal(out.model.params["fuse.conv.weight"].data, base.params["fuse.conv.weight"].data)


def test_evaluate_loss_matches_manual(patches):
    model = build_model(SMALL, seed=2)
    from rrnet.tensor import Tensor, no_grad

    with no_grad():
        out = model(Tensor(patches.recon)).data.astype(np.float64)
    assert evaluate_loss(model, patches, batch=3) == pytest.approx(np.mean((out - patches.label) ** 2), rel=1e-6)
