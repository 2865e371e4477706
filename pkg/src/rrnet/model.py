"""RRNet and the ablation baselines, built from :mod:`rrnet.tensor` ops.

Every model maps normalized planes to one corrected reconstruction plane:

* ``RRNET``            residual plane -> residual branch, reconstruction -> U-shaped branch
* ``DUAL_EDSR``        one 8-layer EDSR stack per input plane
* ``PARTITION_RECON``  as ``DUAL_EDSR`` with the partition mean mask in place of the residual
* ``RECON_ONLY_EDSR``  a single EDSR stack on the reconstruction

The branch features are concatenated, reduced to one channel by a 3x3
convolution and added to the normalized reconstruction (global residual
learning).  Inputs are ordered ``(aux, recon)``; ``RECON_ONLY_EDSR`` takes
only ``(recon,)``.
"""

from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

from .tensor import (
    DimensionError,
    Parameter,
    Tensor,
    add,
    concat_channels,
    conv2d,
    maxpool2x2,
    prelu,
    transposed_conv2d,
)

PRELU_INIT = 0.25
FUSION_INITS = ("zero", "he")


class Variant(enum.IntEnum):
    RRNET = 0
    RECON_ONLY_EDSR = 1
    DUAL_EDSR = 2
    PARTITION_RECON = 3


@dataclass(frozen=True)
class ModelConfig:
    """Architecture choice for one model instance.

    ``stem_channels``/``block_channels`` size the RRNet residual branch;
    ``edsr_channels`` sizes every layer of the EDSR baselines.
    """

    variant: Variant = Variant.RRNET
    stem_channels: int = 64
    block_channels: int = 64
    edsr_channels: int = 32
    qp_tag: int = 37

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for field in ("stem_channels", "block_channels", "edsr_channels"):
            if getattr(self, field) <= 0:
                raise ValueError(f"{field} must be positive")
        if self.variant is Variant.RRNET and self.stem_channels != self.block_channels:
            raise ValueError(
                "stem_channels must equal block_channels: the first residual block "
                "adds its input to its output"
            )

    @property
    def arity(self) -> int:
        return 1 if self.variant is Variant.RECON_ONLY_EDSR else 2

    def with_qp(self, qp: int) -> "ModelConfig":
        return replace(self, qp_tag=qp)


class FilterModel:
    """Ordered named parameters plus a forward pass.

    Parameters are created in a fixed order from a seeded generator, so two
    models built with the same (config, seed, dtype, fusion_init) are
    bit-identical.  ``fusion_init="zero"`` (the default) starts the final
    fusion conv at zero so an untrained model is the identity filter;
    ``"he"`` draws it like every other conv.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32, fusion_init: str = "zero"):
        if fusion_init not in FUSION_INITS:
            raise ValueError(f"fusion_init must be one of {FUSION_INITS}, got {fusion_init!r}")
        self.config = config
        self.fusion_init = fusion_init
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._rng = np.random.default_rng(seed)
        self._capture: Optional[dict] = None
        self.layers: list[str] = []
        self.build()
        del self._rng

    # -- construction -----------------------------------------------------

    def build(self) -> None:
        raise NotImplementedError

    def _add_param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name, dtype=self.dtype)
        self.params[name] = p
        return p

    def _conv(self, name: str, c_in: int, c_out: int, k: int = 3, act: bool = True) -> None:
        std = np.sqrt(2.0 / (c_in * k * k))
        weight = self._rng.normal(0.0, std, size=(c_out, c_in, k, k))
        if name == "fuse.conv" and self.fusion_init == "zero":
            weight[...] = 0.0
        self._add_param(f"{name}.weight", weight)
        self._add_param(f"{name}.bias", np.zeros(c_out))
        if act:
            self._add_param(f"{name}.slope", np.full(c_out, PRELU_INIT))
        self.layers.append(name)

    def _tconv(self, name: str, c_in: int, c_out: int, k: int = 2, stride: int = 2) -> None:
        # each output sample sees c_in * (k / stride)^2 input taps
        fan_in = max(1, c_in * k * k // (stride * stride))
        std = np.sqrt(2.0 / fan_in)
        self._add_param(f"{name}.weight", self._rng.normal(0.0, std, size=(c_in, c_out, k, k)))
        self._add_param(f"{name}.bias", np.zeros(c_out))
        self._add_param(f"{name}.slope", np.full(c_out, PRELU_INIT))
        self.layers.append(name)

    # -- layers -----------------------------------------------------------

    def _keep(self, name: str, t: Tensor) -> Tensor:
        if self._capture is not None:
            self._capture[name] = t
        return t

    def conv_act(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        y = conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=1, padding=1)
        if f"{name}.slope" in p:
            y = prelu(y, p[f"{name}.slope"])
        return self._keep(name, y)

    def tconv_act(self, name: str, x: Tensor) -> Tensor:
        p = self.params
        y = transposed_conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=2, padding=0)
        return self._keep(name, prelu(y, p[f"{name}.slope"]))

    def fuse(self, features: Tensor, recon: Tensor) -> Tensor:
        correction = self.conv_act("fuse.conv", features)
        return self._keep("output", add(correction, recon))

    # -- public -----------------------------------------------------------

    def parameters(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, *inputs: Tensor) -> Tensor:
        return self.forward(*inputs)

    def forward(self, *inputs: Tensor) -> Tensor:
        if len(inputs) != self.config.arity:
            raise ValueError(
                f"{self.config.variant.name} takes {self.config.arity} input plane(s), "
                f"got {len(inputs)}"
            )
        for t in inputs:
            if t.ndim != 4 or t.shape[1] != 1:
                raise DimensionError(f"input planes must be (N, 1, H, W), got {t.shape}", "channels")
        if len(inputs) == 2 and inputs[0].shape != inputs[1].shape:
            raise DimensionError(
                f"input planes differ in shape: {inputs[0].shape} vs {inputs[1].shape}", "height"
            )
        return self._forward(*inputs)

    def _forward(self, *inputs: Tensor) -> Tensor:
        raise NotImplementedError

    def features(self, *inputs: Tensor) -> dict[str, Tensor]:
        """Run a forward pass and return every named layer activation."""
        self._capture = {}
        try:
            self.forward(*inputs)
            return self._capture
        finally:
            self._capture = None

    def copy(self) -> "FilterModel":
        clone = object.__new__(type(self))
        clone.config = self.config
        clone.fusion_init = self.fusion_init
        clone.dtype = self.dtype
        clone.layers = list(self.layers)
        clone._capture = None
        clone.params = OrderedDict(
            (n, Parameter(p.data.copy(), n, dtype=self.dtype)) for n, p in self.params.items()
        )
        return clone

    def __repr__(self) -> str:
        return (
            f"{type(self).__name__}(variant={self.config.variant.name}, "
            f"qp_tag={self.config.qp_tag}, params={self.num_parameters()})"
        )


class RRNet(FilterModel):
    """Residual branch + encoder/decoder reconstruction branch + 3x3 fusion."""

    def build(self) -> None:
        cfg = self.config
        stem, width = cfg.stem_channels, cfg.block_channels
        self._conv("res.conv1", 1, stem)
        for b in (1, 2, 3):
            self._conv(f"res.block{b}.conv1", stem if b == 1 else width, width)
            self._conv(f"res.block{b}.conv2", width, width)
        self._conv("res.conv8", width, 32)

        self._conv("rec.conv1", 1, 32)
        self._conv("rec.conv2", 32, 64)
        self._conv("rec.conv3", 64, 128)
        self._tconv("rec.tconv1", 128, 64)
        self._conv("rec.conv4", 64, 64)
        self._tconv("rec.tconv2", 128, 32)
        self._conv("rec.conv5", 32, 32)
        self._conv("rec.conv6", 64, 32)

        self._conv("fuse.conv", 64, 1, act=False)

    def residual_branch(self, x: Tensor) -> Tensor:
        h = self.conv_act("res.conv1", x)
        for b in (1, 2, 3):
            y = self.conv_act(f"res.block{b}.conv1", h)
            y = self.conv_act(f"res.block{b}.conv2", y)
            h = self._keep(f"res.block{b}", add(y, h))
        return self.conv_act("res.conv8", h)

    def reconstruction_branch(self, z: Tensor) -> Tensor:
        h, w = z.shape[2:]
        if h % 4 or w % 4:
            raise DimensionError(
                f"reconstruction branch needs height and width divisible by 4, got {h}x{w}",
                "height" if h % 4 else "width",
            )
        skip1 = self.conv_act("rec.conv1", z)
        pooled, _ = maxpool2x2(skip1)
        skip2 = self.conv_act("rec.conv2", pooled)
        pooled, _ = maxpool2x2(skip2)
        y = self.conv_act("rec.conv3", pooled)
        y = self.tconv_act("rec.tconv1", y)
        y = self.conv_act("rec.conv4", y)
        y = concat_channels(y, skip2)
        y = self.tconv_act("rec.tconv2", y)
        y = self.conv_act("rec.conv5", y)
        y = concat_channels(y, skip1)
        return self.conv_act("rec.conv6", y)

    def _forward(self, x: Tensor, z: Tensor) -> Tensor:
        res = self.residual_branch(x)
        rec = self.reconstruction_branch(z)
        return self.fuse(concat_channels(res, rec), z)


class _EDSRStacks(FilterModel):
    """Shared construction of 8-layer EDSR stacks (conv, 3 residual blocks, conv)."""

    stacks: tuple[str, ...] = ()

    def _edsr(self, prefix: str) -> None:
        c = self.config.edsr_channels
        self._conv(f"{prefix}.conv1", 1, c)
        for b in (1, 2, 3):
            self._conv(f"{prefix}.block{b}.conv1", c, c)
            self._conv(f"{prefix}.block{b}.conv2", c, c, act=False)
        self._conv(f"{prefix}.conv8", c, c)

    def edsr_stack(self, prefix: str, x: Tensor) -> Tensor:
        h = self.conv_act(f"{prefix}.conv1", x)
        for b in (1, 2, 3):
            y = self.conv_act(f"{prefix}.block{b}.conv1", h)
            y = self.conv_act(f"{prefix}.block{b}.conv2", y)
            h = self._keep(f"{prefix}.block{b}", add(y, h))
        return self.conv_act(f"{prefix}.conv8", h)

    def build(self) -> None:
        for s in self.stacks:
            self._edsr(s)
        self._conv("fuse.conv", self.config.edsr_channels * len(self.stacks), 1, act=False)


class ReconOnlyEDSR(_EDSRStacks):
    stacks = ("rec",)

    def _forward(self, z: Tensor) -> Tensor:
        return self.fuse(self.edsr_stack("rec", z), z)


class DualEDSR(_EDSRStacks):
    stacks = ("aux", "rec")

    def _forward(self, aux: Tensor, z: Tensor) -> Tensor:
        feats = concat_channels(self.edsr_stack("aux", aux), self.edsr_stack("rec", z))
        return self.fuse(feats, z)


class PartitionRecon(DualEDSR):
    """DUAL_EDSR fed with the partition mean mask instead of the residual."""


_CLASSES = {
    Variant.RRNET: RRNet,
    Variant.RECON_ONLY_EDSR: ReconOnlyEDSR,
    Variant.DUAL_EDSR: DualEDSR,
    Variant.PARTITION_RECON: PartitionRecon,
}


def build_model(
    config: ModelConfig, seed: int = 0, dtype=np.float32, fusion_init: str = "zero"
) -> FilterModel:
    return _CLASSES[config.variant](config, seed=seed, dtype=dtype, fusion_init=fusion_init)


def variant_forward(model: FilterModel, *inputs: Tensor) -> Tensor:
    """Forward dispatch with the arity check; same as ``model(*inputs)``."""
    return model.forward(*inputs)


def zero_fusion(model: FilterModel) -> FilterModel:
    """Zero the final fusion conv in place, making the model an identity filter."""
    model.params["fuse.conv.weight"].data[...] = 0
    model.params["fuse.conv.bias"].data[...] = 0
    return model
