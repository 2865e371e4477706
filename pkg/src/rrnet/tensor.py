"""Rank-4 tensors with reverse-mode differentiation.

Every differentiable op appends a node to an implicit tape (a global,
monotonically increasing sequence number).  ``backward`` walks the nodes
reachable from the loss in reverse recorded order, so each node is visited
exactly once and gradients of tensors consumed by several ops add up.

Convolutions are lowered to a single matrix product through an explicit
patch gather (``im2col``); the scatter-add adjoint (``col2im``) serves both
the transposed convolution forward pass and the convolution input gradient.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "TapeError",
    "Tensor",
    "Parameter",
    "no_grad",
    "is_grad_enabled",
    "conv2d",
    "transposed_conv2d",
    "maxpool2x2",
    "prelu",
    "concat_channels",
    "add",
    "mse_loss",
    "backward",
    "im2col",
    "col2im",
]

_AXES = ("batch", "channels", "height", "width")


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible.

    ``axis`` names the offending axis (``"batch"``, ``"channels"``, ...)
    or is ``None`` when the rank itself is wrong.
    """

    def __init__(self, message: str, axis: Optional[str] = None):
        super().__init__(message)
        self.axis = axis


class TapeError(RuntimeError):
    """Raised when ``backward`` is called on a tensor no op recorded."""


_sequence = itertools.count()
_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable recording; ops inside produce plain constant tensors."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.seq = next(_sequence)


class Tensor:
    """Dense array participating in reverse-mode differentiation.

    ``data`` is a C-contiguous float32 (default) or float64 numpy array.
    ``grad`` is populated by :func:`backward` on leaf tensors that require
    gradients and accumulates across calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class Parameter(Tensor):
    """A trainable tensor with a model-unique name such as ``res.conv1.weight``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _record(out_data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, inputs, backward_fn)
    return out


def _check_rank4(t: Tensor, what: str) -> None:
    if t.ndim != 4:
        raise DimensionError(
            f"{what} must be rank 4 (batch, channels, height, width), got shape {t.shape}"
        )


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim != b.ndim:
        raise DimensionError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    for i, (m, n) in enumerate(zip(a.shape, b.shape)):
        if m != n:
            axis = _AXES[i] if a.ndim == 4 else f"axis{i}"
            raise DimensionError(f"{op}: {axis} mismatch ({m} vs {n})", axis=axis)


# ---------------------------------------------------------------------------
# patch gather / scatter


def _to_nhwc(x: np.ndarray, padding: int = 0) -> np.ndarray:
    x = x.transpose(0, 2, 3, 1)
    if padding:
        return np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    return np.ascontiguousarray(x)


def im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Gather every k x k patch of a padded channels-last image into one row.

    ``x`` is (N, Hp, Wp, C), already padded.  Returns ``(N*Ho*Wo, k*k*C)``
    with rows in (n, y, x) order and columns in (ky, kx, c) order.
    """
    n, hp, wp, c = x.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for ky in range(k):
        y_end = ky + stride * (ho - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (wo - 1) + 1
            cols[:, :, :, ky, kx, :] = x[:, ky:y_end:stride, kx:x_end:stride, :]
    return cols.reshape(n * ho * wo, k * k * c)


def col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, padding: int) -> np.ndarray:
    """Scatter-add patch rows onto an image; the adjoint of :func:`im2col`.

    ``shape`` is the unpadded (N, C, H, W) target; the result is returned in
    that NCHW layout with the padding border discarded.
    """
    n, c, h, w = shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = cols.reshape(n, ho, wo, k, k, c)
    img = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for ky in range(k):
        y_end = ky + stride * (ho - 1) + 1
        for kx in range(k):
            x_end = kx + stride * (wo - 1) + 1
            img[:, ky:y_end:stride, kx:x_end:stride, :] += cols[:, :, :, ky, kx, :]
    img = img[:, padding : padding + h, padding : padding + w, :]
    return np.ascontiguousarray(img.transpose(0, 3, 1, 2))


def _bias_grad(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), dtype=np.float64)


# ---------------------------------------------------------------------------
# ops


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding; weight is (C_out, C_in, k, k)."""
    _check_rank4(input, "conv2d input")
    _check_rank4(weight, "conv2d weight")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel must be square, got {kh}x{kw}", axis="width")
    k = kh
    n, c, h, w = input.shape
    if c != c_in:
        raise DimensionError(
            f"conv2d: input has {c} channels but weight expects {c_in}", axis="channels"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)", axis="channels")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    for axis, size in (("height", h), ("width", w)):
        if size + 2 * padding < k:
            raise DimensionError(
                f"conv2d: padded {axis} {size + 2 * padding} smaller than kernel {k}", axis=axis
            )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    # weight columns reordered to the (ky, kx, c) patch layout
    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(c_out, -1)
    x_padded = _to_nhwc(input.data, padding)
    out = im2col(x_padded, k, stride) @ wmat.T
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=input.dtype)

    def backward_fn(g):
        gmat = _to_nhwc(g).reshape(-1, c_out)
        gx = gw = gb = None
        if input.requires_grad:
            gx = col2im(gmat @ wmat, input.shape, k, stride, padding)
        if weight.requires_grad:
            # patches are re-gathered rather than kept alive between passes
            gw = (gmat.T @ im2col(x_padded, k, stride)).reshape(c_out, k, k, c_in)
            gw = gw.transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = _bias_grad(g)
        return gx, gw, gb

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return _record(out, "conv2d", inputs, backward_fn)


def transposed_conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Transposed convolution; weight is (C_in, C_out, k, k).

    Output size per axis is ``(H - 1) * stride - 2 * padding + k``.
    """
    _check_rank4(input, "transposed_conv2d input")
    _check_rank4(weight, "transposed_conv2d weight")
    c_in, c_out, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"transposed_conv2d: kernel must be square, got {kh}x{kw}", axis="width")
    k = kh
    n, c, h, w = input.shape
    if c != c_in:
        raise DimensionError(
            f"transposed_conv2d: input has {c} channels but weight expects {c_in}", axis="channels"
        )
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(
            f"transposed_conv2d: bias shape {bias.shape} != ({c_out},)", axis="channels"
        )
    if stride < 1 or padding < 0:
        raise ValueError("transposed_conv2d: stride must be >= 1 and padding >= 0")
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    for axis, size in (("height", ho), ("width", wo)):
        if size < 1:
            raise DimensionError(f"transposed_conv2d: empty output along {axis}", axis=axis)
    out_shape = (n, c_out, ho, wo)

    wmat = np.ascontiguousarray(weight.data.transpose(0, 2, 3, 1)).reshape(c_in, -1)
    xmat = _to_nhwc(input.data).reshape(-1, c_in)
    out = col2im(xmat @ wmat, out_shape, k, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=input.dtype)

    def backward_fn(g):
        gcols = im2col(_to_nhwc(g, padding), k, stride)
        gx = gw = gb = None
        if input.requires_grad:
            gx = (gcols @ wmat.T).reshape(n, h, w, c_in).transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (xmat.T @ gcols).reshape(c_in, k, k, c_out).transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = _bias_grad(g)
        return gx, gw, gb

    inputs = (input, weight) if bias is None else (input, weight, bias)
    return _record(out, "transposed_conv2d", inputs, backward_fn)


def maxpool2x2(input: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and the argmax index (0..3, row-major within
    each window) of every output element.  Ties go to the first maximum.
    """
    _check_rank4(input, "maxpool2x2 input")
    n, c, h, w = input.shape
    for axis, size in (("height", h), ("width", w)):
        if size % 2:
            raise DimensionError(f"maxpool2x2: {axis} {size} is odd", axis=axis)
    win = (
        input.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        routed = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        gx = (
            routed.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (gx,)

    return _record(np.ascontiguousarray(out), "maxpool2x2", (input,), backward_fn), idx


def prelu(input: Tensor, slope: Tensor) -> Tensor:
    """Channel-wise parametric ReLU: ``x`` if ``x >= 0`` else ``slope[c] * x``."""
    _check_rank4(input, "prelu input")
    c = input.shape[1]
    if slope.shape != (c,):
        raise DimensionError(
            f"prelu: slope shape {slope.shape} does not match {c} channels", axis="channels"
        )
    x = input.data
    a = slope.data.reshape(1, c, 1, 1)
    neg = x < 0
    out = np.where(neg, a * x, x).astype(input.dtype, copy=False)

    def backward_fn(g):
        gx = ga = None
        if input.requires_grad:
            gx = np.where(neg, a * g, g)
        if slope.requires_grad:
            ga = np.where(neg, x * g, 0).sum(axis=(0, 2, 3), dtype=np.float64)
        return gx, ga

    return _record(out, "prelu", (input, slope), backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis."""
    _check_rank4(a, "concat_channels lhs")
    _check_rank4(b, "concat_channels rhs")
    for i in (0, 2, 3):
        if a.shape[i] != b.shape[i]:
            raise DimensionError(
                f"concat_channels: {_AXES[i]} mismatch ({a.shape[i]} vs {b.shape[i]})",
                axis=_AXES[i],
            )
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return g[:, :ca], g[:, ca:]

    return _record(out, "concat_channels", (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def backward_fn(g):
        return g, g

    return _record(out, "add", (a, b), backward_fn)


def mse_loss(pred: Tensor, label: Tensor) -> Tensor:
    """Mean of squared differences over all elements, accumulated in float64."""
    _check_same_shape(pred, label, "mse_loss")
    diff = pred.data.astype(np.float64) - label.data
    count = diff.size
    out = np.asarray(np.dot(diff.ravel(), diff.ravel()) / count)

    def backward_fn(g):
        gp = (2.0 * float(np.asarray(g).reshape(-1)[0]) / count) * diff
        return gp, -gp

    return _record(out, "mse_loss", (pred, label), backward_fn)


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    ``loss`` is normally a scalar; for a non-scalar tensor the seed is all
    ones (i.e. the gradient of ``loss.sum()``).  Repeated calls accumulate.
    """
    if loss._node is None:
        raise TapeError("backward() called on a tensor that was not produced by a recorded op")

    # one traversal: node sequence number -> (node, tensor it produced)
    order: dict[int, tuple[_Node, Tensor]] = {}
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            order[t._node.seq] = (t._node, t)
            stack.extend(i for i in t._node.inputs if i.requires_grad)

    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for seq in sorted(order, reverse=True):
        node, produced = order[seq]
        g = pending.pop(id(produced), None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi).reshape(inp.shape).astype(inp.dtype, copy=False)
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                pending[key] = gi if key not in pending else pending[key] + gi
