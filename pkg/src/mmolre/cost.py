"""Closed-form parameter and FLOP counts.

FLOP convention (forward only, matches the counter in :mod:`mmolre.tensor`):
one multiply-accumulate is 2 FLOPs, each bias add, residual add, gate
multiply, activation, softmax or pooling scalar op is 1 FLOP, and pure data
movement (concat, slicing, reshape, transpose) is free.

The "standard MoE" baseline keeps the same topology (same experts, same
routers, same top-k) but makes every expert full-rank, r = d.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .fusion import FusionConfig
from .unitse import MoLREConfig

STANDARD_BASELINE = "same topology with every expert full-rank (r = d); routers identical"


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


def count_expert_params(d: int, r: int, kernels: Sequence[int] = (3, 1)) -> int:
    k1, k2 = kernels
    return k1 * d * r + r + k2 * r * d + d


def count_router_params(d: int, n_experts: int) -> int:
    h = d // 4
    return d * h + h + h * h + h + h * n_experts + n_experts


def count_block_params(cfg: MoLREConfig) -> int:
    shared = sum(count_expert_params(cfg.d, r, cfg.kernel_sizes) for r in cfg.shared_ranks)
    per_task = count_expert_params(cfg.d, cfg.task_rank, cfg.kernel_sizes) + count_router_params(cfg.d, cfg.n_experts)
    return shared + len(cfg.tasks) * per_task


def count_unitse_params(cfg: MoLREConfig) -> int:
    return cfg.num_blocks * len(cfg.modalities) * count_block_params(cfg)


def count_fusion_params(cfg: FusionConfig) -> int:
    d, ff = cfg.d, cfg.d_ff
    attn = 3 * (d * d + d)
    ffn = d * ff + ff + ff * d + d
    per_layer = 2 * (2 * attn + ffn)
    return 2 * d + cfg.n_layers * per_layer


def count_head_params(d_in: int, hidden: int, d_out: int) -> int:
    return d_in * hidden + hidden + hidden * d_out + d_out


def count_model_params(
    variant: str,
    molre: MoLREConfig,
    fusion_cfg: FusionConfig | None = None,
    n_classes: int = 6,
    head_hidden: int | None = None,
) -> int:
    fusion_cfg = fusion_cfg or FusionConfig(d=molre.d)
    hidden = head_hidden or max(1, molre.d // 2)
    sa = count_head_params(2 * molre.d, hidden, 1)
    er = count_head_params(2 * molre.d, hidden, n_classes)
    fusion = count_fusion_params(fusion_cfg)
    if variant == "single_task_sa":
        return fusion + sa
    if variant == "single_task_er":
        return fusion + er
    if variant == "post_fusion":
        return fusion + sa + er
    if variant == "pre_fusion":
        return 2 * fusion + sa + er
    if variant == "mmolre":
        return count_unitse_params(molre) + 2 * fusion + sa + er
    raise ValueError(f"unknown variant {variant!r}")


# --------------------------------------------------------------------------
# FLOPs
# --------------------------------------------------------------------------


def conv1d_flops(T: int, K: int, c_in: int, c_out: int) -> int:
    """Same-length output; includes the bias add."""
    return 2 * T * K * c_in * c_out + T * c_out


def linear_flops(T: int, d_in: int, d_out: int) -> int:
    return 2 * T * d_in * d_out + T * d_out


def expert_flops(d: int, r: int, kernels: Sequence[int], T: int) -> int:
    k1, k2 = kernels
    return conv1d_flops(T, k1, d, r) + T * r + conv1d_flops(T, k2, r, d)


def router_flops(d: int, n_experts: int, T: int) -> int:
    h = d // 4
    convs = conv1d_flops(T, 1, d, h) + conv1d_flops(T, 1, h, h)
    relus = 2 * T * h
    pool = T * h
    head = linear_flops(1, h, n_experts) + n_experts  # projection + softmax
    return convs + relus + pool + head


def aggregation_flops(d: int, k: int, T: int) -> int:
    # k gate multiplies, k-1 adds across shared terms, 1 add for the task expert
    return 2 * k * T * d


def molre_layer_flops(cfg: MoLREConfig, T: int, selected: Sequence[int] | None = None) -> int:
    """One task's pass through one block. ``selected`` defaults to the
    ``top_k`` highest-rank experts (an upper bound for mixed ranks)."""
    if selected is None:
        selected = sorted(range(cfg.n_experts), key=lambda n: -cfg.shared_ranks[n])[: cfg.top_k]
    shared = sum(expert_flops(cfg.d, cfg.shared_ranks[n], cfg.kernel_sizes, T) for n in selected)
    return (
        router_flops(cfg.d, cfg.n_experts, T)
        + shared
        + expert_flops(cfg.d, cfg.task_rank, cfg.kernel_sizes, T)
        + aggregation_flops(cfg.d, len(selected), T)
    )


def attention_flops(t_q: int, t_k: int, d: int) -> int:
    """Scores, scaling, softmax and weighted sum; projections excluded."""
    return 2 * t_q * t_k * d + 2 * t_q * t_k + 2 * t_q * t_k * d


def _projected_attention_flops(t_q: int, t_k: int, d: int) -> int:
    return linear_flops(t_q, d, d) + 2 * linear_flops(t_k, d, d) + attention_flops(t_q, t_k, d)


def fusion_layer_flops(t_text: int, t_audio: int, d: int, d_ff: int) -> int:
    total = 0
    for t_own, t_other in ((t_text, t_audio), (t_audio, t_text)):
        total += _projected_attention_flops(t_own, t_other, d) + t_own * d
        total += _projected_attention_flops(t_own, t_own, d) + t_own * d
        total += linear_flops(t_own, d, d_ff) + t_own * d_ff + linear_flops(t_own, d_ff, d) + t_own * d
    return total


def fuse_flops(cfg: FusionConfig, t_text: int, t_audio: int) -> int:
    return cfg.n_layers * fusion_layer_flops(t_text + 1, t_audio + 1, cfg.d, cfg.d_ff)


@dataclass(frozen=True)
class Conv1dDesc:
    kernel: int
    c_in: int
    c_out: int


@dataclass(frozen=True)
class ExpertDesc:
    d: int
    rank: int
    kernels: tuple[int, int] = (3, 1)


@dataclass(frozen=True)
class RouterDesc:
    d: int
    n_experts: int


@dataclass(frozen=True)
class MoLRELayerDesc:
    cfg: MoLREConfig
    selected: tuple[int, ...] | None = None


@dataclass(frozen=True)
class FusionDesc:
    cfg: FusionConfig
    t_audio: int


def count_flops(desc, T: int) -> int:
    """Forward FLOPs of the described module on a length-``T`` sequence."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if isinstance(desc, Conv1dDesc):
        return conv1d_flops(T, desc.kernel, desc.c_in, desc.c_out)
    if isinstance(desc, ExpertDesc):
        return expert_flops(desc.d, desc.rank, desc.kernels, T)
    if isinstance(desc, RouterDesc):
        return router_flops(desc.d, desc.n_experts, T)
    if isinstance(desc, MoLRELayerDesc):
        return molre_layer_flops(desc.cfg, T, desc.selected)
    if isinstance(desc, FusionDesc):
        return fuse_flops(desc.cfg, T, desc.t_audio)
    raise TypeError(f"no FLOP rule for {type(desc).__name__}")


# --------------------------------------------------------------------------
# low-rank vs standard comparison
# --------------------------------------------------------------------------


@dataclass
class CostReport:
    config: dict
    seq_len: int
    include: dict
    baseline: str
    scope: str
    params_lowrank: int
    params_standard: int
    flops_lowrank: int
    flops_standard: int
    param_ratio: float
    flop_ratio: float
    savings_pct: float
    breakdown: dict = field(default_factory=dict)
    unitse_params_lowrank: int = 0
    unitse_params_standard: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _tally(cfg: MoLREConfig, T: int, shared: bool, task: bool, routers: bool):
    n_tasks = len(cfg.tasks)
    selected = sorted(range(cfg.n_experts), key=lambda n: -cfg.shared_ranks[n])[: cfg.top_k]
    parts = {
        "shared_experts": {
            "params": sum(count_expert_params(cfg.d, r, cfg.kernel_sizes) for r in cfg.shared_ranks),
            "flops": n_tasks * (
                sum(expert_flops(cfg.d, cfg.shared_ranks[n], cfg.kernel_sizes, T) for n in selected)
                + aggregation_flops(cfg.d, cfg.top_k, T)
            ),
        },
        "task_experts": {
            "params": n_tasks * count_expert_params(cfg.d, cfg.task_rank, cfg.kernel_sizes),
            "flops": n_tasks * expert_flops(cfg.d, cfg.task_rank, cfg.kernel_sizes, T),
        },
        "routers": {
            "params": n_tasks * count_router_params(cfg.d, cfg.n_experts),
            "flops": n_tasks * router_flops(cfg.d, cfg.n_experts, T),
        },
    }
    keep = {"shared_experts": shared, "task_experts": task, "routers": routers}
    params = sum(v["params"] for k, v in parts.items() if keep[k])
    flops = sum(v["flops"] for k, v in parts.items() if keep[k])
    return params, flops, parts


def compare_moe(
    cfg: MoLREConfig,
    T: int = 50,
    include_shared: bool = True,
    include_task: bool = True,
    include_routers: bool = True,
) -> CostReport:
    """Tally one UniTSE block of one modality (all tasks) against its full-rank twin.

    Ratios do not depend on the block/modality multiplicity; whole-UniTSE
    parameter totals are reported alongside.
    """
    if not (include_shared or include_task or include_routers):
        raise ValueError("compare_moe: at least one component must be included")
    standard_cfg = replace(cfg, shared_ranks=[cfg.d] * cfg.n_experts, task_rank=cfg.d)
    p_lr, f_lr, parts_lr = _tally(cfg, T, include_shared, include_task, include_routers)
    p_st, f_st, parts_st = _tally(standard_cfg, T, include_shared, include_task, include_routers)
    ratio = p_st / p_lr
    mult = cfg.num_blocks * len(cfg.modalities)
    return CostReport(
        config={
            "d": cfg.d,
            "n_experts": cfg.n_experts,
            "top_k": cfg.top_k,
            "shared_ranks": list(cfg.shared_ranks),
            "task_rank": cfg.task_rank,
            "kernel_sizes": list(cfg.kernel_sizes),
            "num_blocks": cfg.num_blocks,
            "tasks": list(cfg.tasks),
            "modalities": list(cfg.modalities),
        },
        seq_len=T,
        include={"shared_experts": include_shared, "task_experts": include_task, "routers": include_routers},
        baseline=STANDARD_BASELINE,
        scope="one UniTSE block of one modality, all tasks; FLOPs are one forward pass per task",
        params_lowrank=p_lr,
        params_standard=p_st,
        flops_lowrank=f_lr,
        flops_standard=f_st,
        param_ratio=ratio,
        flop_ratio=f_st / f_lr,
        savings_pct=100.0 * (1.0 - 1.0 / ratio),
        breakdown={"lowrank": parts_lr, "standard": parts_st},
        unitse_params_lowrank=mult * p_lr,
        unitse_params_standard=mult * p_st,
    )
