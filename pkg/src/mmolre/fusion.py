"""Task-adaptive text/audio fusion.

Each task owns its own stack of L layers. A layer runs bidirectional
cross-attention (each modality queries the other), then per-modality
self-attention, then a pointwise FFN; each sub-step is wrapped in a plain
residual connection. A learnable [cls] row is prepended to each modality
before the stack, and the two final [cls] rows are concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from .unitse import uniform_param, zeros_param

MODALITIES = ("text", "audio")


@dataclass
class FusionConfig:
    d: int = 768
    n_layers: int = 5
    d_ff: int | None = None
    n_heads: int = 1

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d={self.d}")


@dataclass
class AttnParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor

    def named_parameters(self, prefix=""):
        return {f"{prefix}{n}": getattr(self, n) for n in ("wq", "bq", "wk", "bk", "wv", "bv")}


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix=""):
        return {f"{prefix}{n}": getattr(self, n) for n in ("w1", "b1", "w2", "b2")}


@dataclass
class FusionLayerParams:
    # keyed by the querying modality: cross["text"] lets text attend to audio
    cross: dict[str, AttnParams]
    self_attn: dict[str, AttnParams]
    ffn: dict[str, FFNParams]

    def named_parameters(self, prefix=""):
        out = {}
        for m in MODALITIES:
            out.update(self.cross[m].named_parameters(f"{prefix}cross_{m}."))
            out.update(self.self_attn[m].named_parameters(f"{prefix}self_{m}."))
            out.update(self.ffn[m].named_parameters(f"{prefix}ffn_{m}."))
        return out


@dataclass
class FusionParams:
    cls: dict[str, Tensor]
    layers: list[FusionLayerParams] = field(default_factory=list)
    n_heads: int = 1

    def named_parameters(self, prefix=""):
        out = {f"{prefix}cls_{m}": self.cls[m] for m in MODALITIES}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}layer{i}."))
        return out


def _init_attn(rng, d):
    return AttnParams(
        wq=uniform_param(rng, (d, d), d), bq=zeros_param((d,)),
        wk=uniform_param(rng, (d, d), d), bk=zeros_param((d,)),
        wv=uniform_param(rng, (d, d), d), bv=zeros_param((d,)),
    )


def _init_ffn(rng, d, d_ff):
    return FFNParams(
        w1=uniform_param(rng, (d, d_ff), d), b1=zeros_param((d_ff,)),
        w2=uniform_param(rng, (d_ff, d), d_ff), b2=zeros_param((d,)),
    )


def init_fusion(rng: np.random.Generator, cfg: FusionConfig) -> FusionParams:
    cls = {m: Tensor(rng.normal(0.0, 0.02, size=(1, cfg.d)), requires_grad=True) for m in MODALITIES}
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            FusionLayerParams(
                cross={m: _init_attn(rng, cfg.d) for m in MODALITIES},
                self_attn={m: _init_attn(rng, cfg.d) for m in MODALITIES},
                ffn={m: _init_ffn(rng, cfg.d, cfg.d_ff) for m in MODALITIES},
            )
        )
    return FusionParams(cls=cls, layers=layers, n_heads=cfg.n_heads)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, T, d = x.shape
    x = tt.reshape(x, (*lead, T, n_heads, d // n_heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return tt.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, T, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return tt.reshape(tt.transpose(x, axes), (*lead, T, h * dh))


def projected_attention(query_src: Tensor, kv_src: Tensor, p: AttnParams, n_heads: int = 1) -> Tensor:
    q = tt.linear(query_src, p.wq, p.bq)
    k = tt.linear(kv_src, p.wk, p.bk)
    v = tt.linear(kv_src, p.wv, p.bv)
    if n_heads == 1:
        return tt.attention(q, k, v)
    heads = tt.attention(_split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads))
    return _merge_heads(heads)


def prepend_cls(h: Tensor, cls: Tensor) -> Tensor:
    """Put the ``[1, d]`` cls row in front of ``h`` (``[T, d]`` or ``[B, T, d]``)."""
    if cls.shape != (1, h.shape[-1]):
        raise tt.ShapeError(f"prepend_cls: cls shape {cls.shape} does not match width {h.shape[-1]}")
    if h.ndim == 2:
        return tt.concat([cls, h], axis=0)
    B = h.shape[0]
    rows = tt.reshape(cls[np.zeros(B, dtype=np.intp)], (B, 1, h.shape[-1]))
    return tt.concat([rows, h], axis=1)


def cross_attention_pair(h_t: Tensor, h_a: Tensor, p: FusionLayerParams, n_heads: int = 1):
    """Text attends to audio and audio attends to text; no residual here."""
    if h_t.shape[-1] != h_a.shape[-1]:
        raise tt.ShapeError(f"cross_attention: widths differ ({h_t.shape[-1]} vs {h_a.shape[-1]})")
    z_t = projected_attention(h_t, h_a, p.cross["text"], n_heads)
    z_a = projected_attention(h_a, h_t, p.cross["audio"], n_heads)
    return z_t, z_a


def ffn_forward(x: Tensor, p: FFNParams) -> Tensor:
    return tt.linear(tt.relu(tt.linear(x, p.w1, p.b1)), p.w2, p.b2)


def fusion_layer(h_t: Tensor, h_a: Tensor, p: FusionLayerParams, n_heads: int = 1):
    z_t, z_a = cross_attention_pair(h_t, h_a, p, n_heads)
    h_t, h_a = h_t + z_t, h_a + z_a
    h_t = h_t + projected_attention(h_t, h_t, p.self_attn["text"], n_heads)
    h_a = h_a + projected_attention(h_a, h_a, p.self_attn["audio"], n_heads)
    h_t = h_t + ffn_forward(h_t, p.ffn["text"])
    h_a = h_a + ffn_forward(h_a, p.ffn["audio"])
    return h_t, h_a


def _cls_row(h: Tensor) -> Tensor:
    return h[0] if h.ndim == 2 else h[:, 0]


def fuse(h_t: Tensor, h_a: Tensor, p: FusionParams) -> Tensor:
    """Fused ``[2d]`` vector (``[B, 2d]`` for batches): text cls then audio cls."""
    t = prepend_cls(h_t, p.cls["text"])
    a = prepend_cls(h_a, p.cls["audio"])
    for layer in p.layers:
        t, a = fusion_layer(t, a, layer, p.n_heads)
    return tt.concat([_cls_row(t), _cls_row(a)], axis=-1)
