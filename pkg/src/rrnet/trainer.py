"""Patch datasets, Adam with step decay, and the training / fine-tuning loops.

Training minimises the pixel MSE between the filter output and the original
in the normalized domain (all planes divided by 255).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .codec import Frame, encode_frame, partition_mean_mask
from .formats import (
    FormatError,
    atomic_write,
    read_partition,
    read_pgm,
    read_resi,
    write_partition,
    write_pgm,
    write_resi,
)
from .model import FilterModel, ModelConfig, Variant, build_model
from .tensor import Tensor, backward, mse_loss

log = logging.getLogger(__name__)

PATCH_SIZE = 64
SCALE = 255.0


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class SampleRecord:
    original_path: str
    reconstruction_path: str
    residual_path: str
    qp: int
    origin: tuple  # (x, y) of the patch's top-left corner


@dataclass
class DatasetManifest:
    """Patch records whose paths are relative to ``root`` (the manifest's directory)."""

    records: list
    root: Path
    patch_size: int = PATCH_SIZE
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def qps(self) -> set:
        return {r.qp for r in self.records}

    def subset(self, qp: int) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.qp == qp], self.root, self.patch_size)

    # serialization: one header comment, then tab-separated records
    def dumps(self) -> str:
        lines = [f"# patch_size={self.patch_size}"]
        for r in self.records:
            x, y = r.origin
            lines.append(
                "\t".join(
                    [r.original_path, r.reconstruction_path, r.residual_path, str(r.qp), f"{x},{y}"]
                )
            )
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        atomic_write(path, self.dumps().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        patch_size = PATCH_SIZE
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key.strip() == "patch_size":
                    patch_size = int(value)
                continue
            fields = line.split("\t")
            if len(fields) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(fields)}")
            try:
                x, y = (int(v) for v in fields[4].split(","))
                records.append(SampleRecord(fields[0], fields[1], fields[2], int(fields[3]), (x, y)))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
        return cls(records, path.parent, patch_size)

    def validate(self) -> None:
        """Check every referenced file exists and holds the patch."""
        for r in self.records:
            for rel in (r.original_path, r.reconstruction_path, r.residual_path):
                if not (self.root / rel).is_file():
                    raise FileNotFoundError(self.root / rel)
            h, w = read_pgm(self.root / r.original_path).plane.shape
            x, y = r.origin
            if x + self.patch_size > w or y + self.patch_size > h:
                raise FormatError(f"patch at {r.origin} exceeds {w}x{h} frame {r.original_path}")


def partition_path_for(reconstruction_path: str) -> str:
    """Partition files sit next to the reconstruction they belong to."""
    assert reconstruction_path.endswith(".recon.pgm")
    return reconstruction_path[: -len(".recon.pgm")] + ".part.txt"


def patch_origins(height: int, width: int, patch: int, stride: int) -> list:
    return [(x, y) for y in range(0, height - patch + 1, stride) for x in range(0, width - patch + 1, stride)]


def build_dataset(
    images: Sequence[Frame] | dict,
    qps: Sequence[int],
    out_dir,
    stride: int = PATCH_SIZE,
    patch_size: int = PATCH_SIZE,
    var_threshold: Optional[float] = None,
) -> DatasetManifest:
    """Encode every image at every qp and tile patches into a manifest.

    ``images`` is a list of frames or a ``{name: frame}`` mapping.  Frames
    smaller than one patch are skipped; their count is ``manifest.skipped``.
    The manifest is written to ``out_dir/manifest.tsv``.
    """
    if not images:
        raise ValueError("build_dataset needs at least one image")
    if not qps:
        raise ValueError("build_dataset needs at least one qp")
    if stride < 1:
        raise ValueError("stride must be positive")
    if not isinstance(images, dict):
        images = {f"img{i:03d}": f for i, f in enumerate(images)}
    out_dir = Path(out_dir)
    kwargs = {} if var_threshold is None else {"var_threshold": var_threshold}

    records = []
    skipped = 0
    for name, frame in images.items():
        if frame.height < patch_size or frame.width < patch_size:
            log.warning("skipping %s: %dx%d is smaller than one patch", name, frame.width, frame.height)
            skipped += 1
            continue
        orig_rel = f"frames/{name}.orig.pgm"
        write_pgm(out_dir / orig_rel, frame)
        origins = patch_origins(frame.height, frame.width, patch_size, stride)
        for qp in qps:
            triple = encode_frame(frame, qp, **kwargs)
            recon_rel = f"frames/{name}.q{qp}.recon.pgm"
            resi_rel = f"frames/{name}.q{qp}.resi"
            write_pgm(out_dir / recon_rel, triple.reconstruction)
            write_resi(out_dir / resi_rel, triple.residual)
            write_partition(out_dir / partition_path_for(recon_rel), triple.partition)
            records += [SampleRecord(orig_rel, recon_rel, resi_rel, qp, o) for o in origins]

    manifest = DatasetManifest(records, out_dir, patch_size, skipped)
    manifest.save(out_dir / "manifest.tsv")
    return manifest


@dataclass
class PatchArrays:
    """Normalized float32 arrays, each (N, 1, P, P)."""

    recon: np.ndarray
    residual: np.ndarray
    mask: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.label)

    def inputs(self, variant: Variant, idx) -> tuple:
        z = Tensor(self.recon[idx])
        if variant is Variant.RECON_ONLY_EDSR:
            return (z,)
        aux = self.mask if variant is Variant.PARTITION_RECON else self.residual
        return Tensor(aux[idx]), z


def normalize_planes(recon, residual, mask=None, original=None) -> dict:
    out = {
        "recon": np.asarray(recon, dtype=np.float32) / np.float32(SCALE),
        "residual": np.asarray(residual, dtype=np.float32) / np.float32(SCALE),
    }
    if mask is not None:
        out["mask"] = np.asarray(mask, dtype=np.float32) / np.float32(SCALE)
    if original is not None:
        out["label"] = np.asarray(original, dtype=np.float32) / np.float32(SCALE)
    return out


def load_patches(manifest: DatasetManifest) -> PatchArrays:
    """Read every record's planes (frames cached) into normalized arrays."""
    cache: dict = {}

    def frame(rel, reader):
        if rel not in cache:
            cache[rel] = reader(manifest.root / rel)
        return cache[rel]

    def mask_for(recon_rel):
        key = ("mask", recon_rel)
        if key not in cache:
            recon = frame(recon_rel, lambda p: read_pgm(p))
            part = read_partition(manifest.root / partition_path_for(recon_rel))
            cache[key] = partition_mean_mask(recon, part).plane
        return cache[key]

    p = manifest.patch_size
    n = len(manifest.records)
    arrays = {k: np.empty((n, 1, p, p), dtype=np.float32) for k in ("recon", "residual", "mask", "label")}
    for i, r in enumerate(manifest.records):
        x, y = r.origin
        win = (slice(y, y + p), slice(x, x + p))
        recon = frame(r.reconstruction_path, read_pgm).plane
        planes = normalize_planes(
            recon[win],
            frame(r.residual_path, read_resi)[win],
            mask_for(r.reconstruction_path)[win],
            frame(r.original_path, read_pgm).plane[win],
        )
        for k, v in planes.items():
            arrays[k][i, 0] = v
    return PatchArrays(**arrays)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class LRSchedule:
    """Step decay: ``base * gamma ** floor(epoch / interval)``."""

    base: float = 1e-4
    gamma: float = 0.1
    interval: int = 100
    total_epochs: int = 120

    def lr(self, epoch: int) -> float:
        return self.base * self.gamma ** (epoch // self.interval)

    def scaled_to(self, epochs: int) -> "LRSchedule":
        """Shrink the decay interval proportionally for runs shorter than the full schedule."""
        if epochs >= self.total_epochs:
            return self
        interval = max(1, round(epochs * self.interval / self.total_epochs))
        return LRSchedule(self.base, self.gamma, interval, epochs)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(model: FilterModel, state: AdamState, lr: float) -> None:
    """One decoupled-weight-decay Adam update from the gradients in ``model``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    params = list(model.parameters())
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: FilterModel
    history: list  # per-epoch mean training loss
    steps: int


def _epoch_batches(rng: np.random.Generator, n: int, batch: int) -> list:
    order = rng.permutation(n)
    return [order[i : i + batch] for i in range(0, n - batch + 1, batch)]


def fit(
    model: FilterModel,
    data: PatchArrays,
    epochs: int,
    batch: int,
    schedule: LRSchedule,
    seed: int,
    state: Optional[AdamState] = None,
    on_epoch: Optional[Callable[[int, float, float], None]] = None,
) -> tuple[list, int]:
    rng = np.random.default_rng(seed)
    state = state or AdamState()
    variant = model.config.variant
    history = []
    steps = 0
    for epoch in range(epochs):
        lr = schedule.lr(epoch)
        losses = []
        for idx in _epoch_batches(rng, len(data), batch):
            model.zero_grad()
            out = model(*data.inputs(variant, idx))
            loss = mse_loss(out, Tensor(data.label[idx]))
            backward(loss)
            adam_step(model, state, lr)
            losses.append(loss.item())
            steps += 1
        mean = float(np.mean(losses)) if losses else math.nan
        history.append(mean)
        log.info("epoch %d/%d lr=%.1e loss=%.6g", epoch + 1, epochs, lr, mean)
        if on_epoch is not None:
            on_epoch(epoch, lr, mean)
    return history, steps


def train(
    config: ModelConfig,
    manifest: DatasetManifest,
    epochs: int,
    batch: int = 16,
    seed: int = 0,
    schedule: Optional[LRSchedule] = None,
    weight_decay: float = 1e-4,
    data: Optional[PatchArrays] = None,
    on_epoch=None,
) -> TrainResult:
    """Train a fresh model of ``config`` on ``manifest`` from a seeded init."""
    _check_manifest(manifest, config.qp_tag)
    schedule = (schedule or LRSchedule()).scaled_to(epochs)
    model = build_model(config, seed=seed)
    data = data if data is not None else load_patches(manifest)
    history, steps = fit(
        model, data, epochs, batch, schedule, seed, AdamState(weight_decay=weight_decay), on_epoch
    )
    return TrainResult(model, history, steps)


def fine_tune(
    base: FilterModel,
    manifest: DatasetManifest,
    epochs: int = 20,
    batch: int = 16,
    seed: int = 0,
    lr: float = 1e-4,
    weight_decay: float = 1e-4,
    data: Optional[PatchArrays] = None,
    on_epoch=None,
) -> TrainResult:
    """Continue training a copy of ``base`` at constant ``lr`` on a new qp."""
    if not len(manifest):
        raise ValueError("empty manifest")
    qps = manifest.qps
    if len(qps) != 1:
        raise ValueError(f"fine-tuning manifest must hold a single qp, got {sorted(qps)}")
    target = qps.pop()
    model = base.copy()
    model.config = base.config.with_qp(target)
    if epochs == 0:
        return TrainResult(model, [], 0)
    data = data if data is not None else load_patches(manifest)
    schedule = LRSchedule(base=lr, gamma=1.0, interval=max(epochs, 1), total_epochs=epochs)
    history, steps = fit(
        model, data, epochs, batch, schedule, seed, AdamState(weight_decay=weight_decay), on_epoch
    )
    return TrainResult(model, history, steps)


def _check_manifest(manifest: DatasetManifest, qp: int) -> None:
    if not len(manifest):
        raise ValueError("empty manifest")
    qps = manifest.qps
    if qps != {qp}:
        raise ValueError(f"manifest qps {sorted(qps)} do not match model qp_tag {qp}")


def evaluate_loss(model: FilterModel, data: PatchArrays, batch: int = 16) -> float:
    """Mean per-pixel MSE of ``model`` over every patch (no gradients)."""
    from .tensor import no_grad

    total = 0.0
    with no_grad():
        for start in range(0, len(data), batch):
            idx = np.arange(start, min(start + batch, len(data)))
            out = model(*data.inputs(model.config.variant, idx))
            diff = out.data.astype(np.float64) - data.label[idx]
            total += float(np.sum(diff * diff))
    return total / data.label.size
