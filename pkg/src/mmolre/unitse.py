"""Mixture of shared and task-specific low-rank experts with top-k routing.

Each block owns N shared experts, one expert per task and one router per
task. A task's output is the raw-gate-weighted sum of its top-k shared
experts plus its own task expert. Gates are not renormalized after
selection.

All forward functions accept an unbatched ``[T, d]`` sequence or a batch
``[B, T, d]``. Routing is per sequence: in the batched case each row gets its
own top-k set, and experts chosen by no row are never evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass
class MoLREConfig:
    d: int = 768
    n_experts: int = 15
    top_k: int = 8
    shared_ranks: list[int] | None = None
    task_rank: int = 128
    kernel_sizes: tuple[int, int] = (3, 1)
    num_blocks: int = 2
    tasks: tuple[str, ...] = ("SA", "ER")
    modalities: tuple[str, ...] = ("text", "audio")

    def __post_init__(self):
        if self.shared_ranks is None:
            self.shared_ranks = [128] * self.n_experts
        self.shared_ranks = [int(r) for r in self.shared_ranks]
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.tasks = tuple(self.tasks)
        self.modalities = tuple(self.modalities)
        self.validate()

    def validate(self) -> None:
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.n_experts < 1:
            raise ValueError(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"top_k must lie in [1, n_experts={self.n_experts}], got {self.top_k}")
        if len(self.shared_ranks) != self.n_experts:
            raise ValueError(
                f"shared_ranks has {len(self.shared_ranks)} entries, expected n_experts={self.n_experts}"
            )
        for r in self.shared_ranks:
            if not 1 <= r <= self.d:
                raise ValueError(f"shared rank {r} outside [1, d={self.d}]")
        if not 1 <= self.task_rank <= self.d:
            raise ValueError(f"task_rank {self.task_rank} outside [1, d={self.d}]")
        if len(self.kernel_sizes) != 2 or any(k < 1 or k % 2 == 0 for k in self.kernel_sizes):
            raise ValueError(f"kernel_sizes must be two odd positive ints, got {self.kernel_sizes}")
        if self.num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {self.num_blocks}")
        if not self.tasks:
            raise ValueError("tasks must be nonempty")

    @property
    def router_width(self) -> int:
        return self.d // 4


@dataclass
class ExpertParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def rank(self) -> int:
        return self.w1.shape[2]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1, f"{prefix}w2": self.w2, f"{prefix}b2": self.b2}


@dataclass
class RouterParams:
    w1: Tensor  # [1, d, d/4]
    b1: Tensor
    w2: Tensor  # [1, d/4, d/4]
    b2: Tensor
    proj: Tensor  # [d/4, N]; column n is expert n's routing key
    proj_b: Tensor

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        names = ("w1", "b1", "w2", "b2", "proj", "proj_b")
        return {f"{prefix}{n}": getattr(self, n) for n in names}


@dataclass
class UniTSEBlock:
    shared: list[ExpertParams]
    task_experts: dict[str, ExpertParams]
    routers: dict[str, RouterParams]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for n, e in enumerate(self.shared):
            out.update(e.named_parameters(f"{prefix}shared{n}."))
        for task, e in self.task_experts.items():
            out.update(e.named_parameters(f"{prefix}task_{task}."))
        for task, r in self.routers.items():
            out.update(r.named_parameters(f"{prefix}router_{task}."))
        return out


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def uniform_param(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_expert(rng: np.random.Generator, d: int, rank: int, kernel_sizes=(3, 1)) -> ExpertParams:
    k1, k2 = kernel_sizes
    return ExpertParams(
        w1=uniform_param(rng, (k1, d, rank), k1 * d),
        b1=zeros_param((rank,)),
        w2=uniform_param(rng, (k2, rank, d), k2 * rank),
        b2=zeros_param((d,)),
    )


def init_router(rng: np.random.Generator, d: int, n_experts: int) -> RouterParams:
    if d % 4:
        raise ValueError(f"router needs d divisible by 4, got d={d}")
    h = d // 4
    return RouterParams(
        w1=uniform_param(rng, (1, d, h), d),
        b1=zeros_param((h,)),
        w2=uniform_param(rng, (1, h, h), h),
        b2=zeros_param((h,)),
        proj=uniform_param(rng, (h, n_experts), h),
        proj_b=zeros_param((n_experts,)),
    )


def init_block(rng: np.random.Generator, cfg: MoLREConfig) -> UniTSEBlock:
    shared = [init_expert(rng, cfg.d, r, cfg.kernel_sizes) for r in cfg.shared_ranks]
    task_experts = {t: init_expert(rng, cfg.d, cfg.task_rank, cfg.kernel_sizes) for t in cfg.tasks}
    routers = {t: init_router(rng, cfg.d, cfg.n_experts) for t in cfg.tasks}
    return UniTSEBlock(shared=shared, task_experts=task_experts, routers=routers)


def init_unitse(rng: np.random.Generator, cfg: MoLREConfig) -> list[UniTSEBlock]:
    return [init_block(rng, cfg) for _ in range(cfg.num_blocks)]


# --------------------------------------------------------------------------
# forward
# --------------------------------------------------------------------------


def low_rank_expert_forward(x: Tensor, p: ExpertParams) -> Tensor:
    """conv(K1, d->r) -> ReLU -> conv(K2, r->d), same padding."""
    d_in = p.w1.shape[1]
    if x.shape[-1] != d_in:
        raise tt.ShapeError(f"low_rank_expert: input width {x.shape[-1]} != expert width {d_in}")
    k1, k2 = p.w1.shape[0], p.w2.shape[0]
    h = tt.relu(tt.conv1d(x, p.w1, p.b1, padding=(k1 - 1) // 2))
    return tt.conv1d(h, p.w2, p.b2, padding=(k2 - 1) // 2)


def router_gates(x: Tensor, p: RouterParams) -> Tensor:
    """Gate vector ``[N]`` (or ``[B, N]``) for a sequence (or batch)."""
    if x.shape[-2] == 0:
        raise tt.ShapeError("router: empty sequence, cannot pool over time")
    h = tt.relu(tt.conv1d(x, p.w1, p.b1))
    h = tt.relu(tt.conv1d(h, p.w2, p.b2))
    pooled = tt.mean(h, axis=-2)
    return tt.softmax(tt.linear(pooled, p.proj, p.proj_b))


def top_k_select(gates, k: int) -> list[tuple[int, float]]:
    """The ``k`` largest gates as ``(index, gate)`` pairs, largest first.
    Ties go to the lower index."""
    g = np.asarray(gates.data if isinstance(gates, Tensor) else gates, dtype=np.float64)
    if g.ndim != 1:
        raise ValueError(f"top_k_select expects a 1-D gate vector, got shape {g.shape}")
    if not 1 <= k <= g.size:
        raise ValueError(f"top_k_select: k={k} outside [1, {g.size}]")
    order = np.argsort(-g, kind="stable")[:k]
    return [(int(i), float(g[i])) for i in order]


def top_k_mask(gates: np.ndarray, k: int) -> np.ndarray:
    """Row-wise 0/1 mask of the top-k entries of a ``[B, N]`` gate matrix."""
    if not 1 <= k <= gates.shape[-1]:
        raise ValueError(f"top_k_mask: k={k} outside [1, {gates.shape[-1]}]")
    order = np.argsort(-gates, axis=-1, kind="stable")[:, :k]
    mask = np.zeros_like(gates)
    np.put_along_axis(mask, order, 1.0, axis=-1)
    return mask


def molre_layer_forward(x: Tensor, block: UniTSEBlock, task: str, cfg: MoLREConfig) -> Tensor:
    """One task's output of one block: top-k gated shared experts plus the task expert."""
    if task not in block.routers or task not in block.task_experts:
        raise KeyError(f"task {task!r} not present in block (have {sorted(block.routers)})")
    gates = router_gates(x, block.routers[task])
    if x.ndim == 2:
        selected = top_k_select(gates.data, cfg.top_k)
        tt.record_kink("topk", [i for i, _ in selected])
        acc = None
        for n, _ in selected:
            term = gates[n] * low_rank_expert_forward(x, block.shared[n])
            acc = term if acc is None else acc + term
        return acc + low_rank_expert_forward(x, block.task_experts[task])

    mask = top_k_mask(gates.data, cfg.top_k)
    tt.record_kink("topk", mask)
    masked = gates * Tensor(mask)
    B = x.shape[0]
    acc = None
    for n in np.flatnonzero(mask.any(axis=0)):
        g_n = tt.reshape(masked[:, int(n)], (B, 1, 1))
        term = g_n * low_rank_expert_forward(x, block.shared[int(n)])
        acc = term if acc is None else acc + term
    return acc + low_rank_expert_forward(x, block.task_experts[task])


def unitse_forward(x: Tensor, blocks: list[UniTSEBlock], cfg: MoLREConfig) -> dict[str, Tensor]:
    """Run the block stack for one modality; returns one feature stream per task."""
    if not blocks:
        raise ValueError("unitse_forward: empty block list")
    if len(blocks) != cfg.num_blocks:
        raise ValueError(f"unitse_forward: got {len(blocks)} blocks, config says {cfg.num_blocks}")
    streams = {task: x for task in cfg.tasks}
    for block in blocks:
        streams = {task: molre_layer_forward(streams[task], block, task, cfg) for task in cfg.tasks}
    return streams
