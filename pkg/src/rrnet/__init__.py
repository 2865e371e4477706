"""Residual-guided CNN in-loop filtering at desk scale.

Subpackages: ``tensor`` (autograd), ``codec`` (toy intra codec),
``model`` (RRNet and baselines), ``trainer``, ``evaluate``, ``weights``,
``config`` and ``cli``.
"""

from .codec import CodedTriple, Frame, Partition, encode_frame
from .model import ModelConfig, Variant, build_model
from .tensor import Parameter, Tensor

__version__ = "0.1.0"

__all__ = [
    "CodedTriple",
    "Frame",
    "ModelConfig",
    "Parameter",
    "Partition",
    "Tensor",
    "Variant",
    "build_model",
    "encode_frame",
]
