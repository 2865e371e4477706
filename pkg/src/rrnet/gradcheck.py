"""Central finite-difference checks of every tensor op and of a full RRNet pass.

All checks run in float64.  The scalar being differentiated is
``sum(out * probe)`` for a fixed random probe, so every output element
contributes with a distinct weight.
"""

from __future__ import annotations

import time
from typing import Callable, Sequence

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    add,
    backward,
    concat_channels,
    conv2d,
    maxpool2x2,
    mse_loss,
    no_grad,
    prelu,
    transposed_conv2d,
)

STEP = 1e-6
TOLERANCE = 1e-5


def numerical_grad(
    f: Callable[[], float], arr: np.ndarray, h: float = STEP, indices=None
) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``arr`` (mutated in place, restored).

    With ``indices`` only those flat positions are probed; the rest of the
    returned array is NaN.
    """
    flat = arr.reshape(-1)
    out = np.full(flat.shape, np.nan)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    mask = ~np.isnan(numeric)
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = numeric[mask]
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check(
    build: Callable[[Sequence[Tensor]], Tensor],
    tensors: Sequence[Tensor],
    rng: np.random.Generator,
    h: float = STEP,
    max_probes: int | None = None,
) -> dict[str, float]:
    """Compare analytic and numeric gradients of ``build(tensors)``.

    Returns ``{label: relative error}`` per differentiable input; parameters
    are labelled by name, plain tensors by position.
    """
    with no_grad():
        probe_shape = build(tensors).shape
    probe = rng.uniform(-1.0, 1.0, size=probe_shape)

    def scalar() -> float:
        with no_grad():
            return float(np.sum(build(tensors).data * probe))

    for t in tensors:
        t.zero_grad()
    out = build(tensors)
    # seed through a weighted sum: d/d(out) of sum(out*probe) is probe
    target = Tensor(out.data - probe / 2.0)
    loss = mse_loss(out, target)
    backward(loss)
    # mse grad is 2*(out - target)/N = probe/N
    scale = float(out.data.size)

    errors = {}
    for pos, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        label = getattr(t, "name", None) or f"input{pos}"
        indices = None
        if max_probes is not None and t.data.size > max_probes:
            indices = rng.choice(t.data.size, size=max_probes, replace=False)
        numeric = numerical_grad(scalar, t.data, h, indices)
        errors[label] = relative_error(t.grad * scale, numeric)
    return errors


def _rand(rng, shape, name=None):
    data = rng.uniform(-1.0, 1.0, size=shape)
    if name is None:
        return Tensor(data, requires_grad=True, dtype=np.float64)
    return Parameter(data, name, dtype=np.float64)


def op_suite(seed: int = 0) -> dict[str, float]:
    """Max relative error for each tensor op on small random float64 operands."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def record(label, errs):
        results[label] = max(errs.values())

    for stride, pad in ((1, 1), (2, 0), (2, 1)):
        ts = [_rand(rng, (2, 3, 8, 8)), _rand(rng, (4, 3, 3, 3), "w"), _rand(rng, (4,), "b")]
        record(
            f"conv2d[s{stride},p{pad}]",
            check(lambda t: conv2d(t[0], t[1], t[2], stride, pad), ts, rng),
        )
    for k, stride, pad in ((2, 2, 0), (3, 2, 1)):
        ts = [_rand(rng, (2, 4, 4, 4)), _rand(rng, (4, 3, k, k), "w"), _rand(rng, (3,), "b")]
        record(
            f"transposed_conv2d[k{k},s{stride},p{pad}]",
            check(lambda t: transposed_conv2d(t[0], t[1], t[2], stride, pad), ts, rng),
        )
    record("maxpool2x2", check(lambda t: maxpool2x2(t[0])[0], [_rand(rng, (2, 4, 8, 8))], rng))
    ts = [_rand(rng, (2, 4, 8, 8)), _rand(rng, (4,), "slope")]
    record("prelu", check(lambda t: prelu(t[0], t[1]), ts, rng))
    ts = [_rand(rng, (2, 3, 8, 8)), _rand(rng, (2, 2, 8, 8))]
    record("concat_channels", check(lambda t: concat_channels(t[0], t[1]), ts, rng))
    ts = [_rand(rng, (2, 4, 8, 8)), _rand(rng, (2, 4, 8, 8))]
    record("add", check(lambda t: add(t[0], t[1]), ts, rng))
    ts = [_rand(rng, (2, 4, 8, 8)), _rand(rng, (2, 4, 8, 8))]
    record("mse_loss", check(lambda t: mse_loss(t[0], t[1]), ts, rng))
    return results


def model_suite(seed: int = 0, probes_per_param: int = 4) -> dict[str, float]:
    """Gradient check of a float64 RRNet on (1, 1, 8, 8) inputs.

    Every parameter tensor is probed at ``probes_per_param`` random entries;
    both input planes are probed at every entry.
    """
    from .model import ModelConfig, RRNet

    rng = np.random.default_rng(seed)
    model = RRNet(ModelConfig(), seed=seed, dtype=np.float64, fusion_init="he")
    # non-zero biases and slopes so every path carries signal
    for p in model.parameters():
        if p.name.endswith(".bias"):
            p.data[...] = rng.uniform(-0.1, 0.1, size=p.shape)
        elif p.name.endswith(".slope"):
            p.data[...] = rng.uniform(0.1, 0.4, size=p.shape)
    x = _rand(rng, (1, 1, 8, 8))
    z = Tensor(rng.uniform(0.0, 1.0, size=(1, 1, 8, 8)), requires_grad=True, dtype=np.float64)
    params = list(model.parameters())
    tensors = [x, z, *params]

    errs = check(lambda t: model.forward(t[0], t[1]), tensors, rng, max_probes=probes_per_param)
    return {"rrnet." + k if k.startswith("input") else k: v for k, v in errs.items()}


def run(seed: int = 0) -> tuple[float, dict[str, float], float]:
    """Run both suites; returns (max error, per-check errors, seconds)."""
    start = time.perf_counter()
    results = op_suite(seed)
    model_errs = model_suite(seed)
    results["rrnet(full)"] = max(model_errs.values())
    return max(results.values()), results, time.perf_counter() - start
