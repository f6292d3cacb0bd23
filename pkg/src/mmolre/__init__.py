"""Multimodal mixture of low-rank experts on a small numpy autograd engine."""

from .tensor import Tensor
from .unitse import MoLREConfig
from .fusion import FusionConfig
from .model import Sample, TrainConfig, build_variant

__version__ = "0.1.0"

__all__ = ["Tensor", "MoLREConfig", "FusionConfig", "Sample", "TrainConfig", "build_variant"]
