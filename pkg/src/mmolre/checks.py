"""Gradient-check suite: every autograd primitive plus the model components.

Primitive checks contract each op's output against a fixed random cotangent,
``sum(op(x) * R)``, so the whole Jacobian is exercised, at 10 random points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tt
from .fusion import FusionConfig, fuse, init_fusion
from .gradcheck import check_parameters, check_tensor
from .model import batch_losses, build_variant, Sample
from .tensor import Tensor
from .unitse import MoLREConfig, init_block, init_expert, init_router, low_rank_expert_forward, molre_layer_forward, router_gates

TOLERANCE = 1e-4
N_POINTS = 10


@dataclass
class CheckResult:
    name: str
    max_error: float
    checked: int
    kinks: int
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and self.max_error < TOLERANCE


def _contracted(op: Callable[..., Tensor], inputs: list[np.ndarray], rng, wrt: int) -> tuple[float, int, int]:
    """Check d/d(inputs[wrt]) of sum(op(*inputs) * R)."""
    leaves = [Tensor(x, requires_grad=(i == wrt)) for i, x in enumerate(inputs)]
    probe = op(*leaves)
    cot = Tensor(rng.normal(size=probe.shape))

    def loss():
        return tt.sum(op(*leaves) * cot)

    rep = check_tensor(loss, leaves[wrt], eps=1e-5)
    return rep.max_error, rep.checked, len(rep.kinks)


def _primitive_cases() -> dict[str, tuple[Callable, Callable[[np.random.Generator], list[np.ndarray]], tuple[int, ...]]]:
    """op name -> (function, input sampler, indices of differentiable inputs)."""
    n = lambda rng, *s: rng.normal(size=s)  # noqa: E731
    return {
        "add": (tt.add, lambda r: [n(r, 3, 4), n(r, 4)], (0, 1)),
        "sub": (tt.sub, lambda r: [n(r, 3, 4), n(r, 1, 4)], (0, 1)),
        "mul": (tt.mul, lambda r: [n(r, 2, 3, 4), n(r, 3, 1)], (0, 1)),
        "scale": (lambda a: tt.scale(a, -1.7), lambda r: [n(r, 5)], (0,)),
        "matmul": (tt.matmul, lambda r: [n(r, 2, 3, 4), n(r, 4, 2)], (0, 1)),
        "conv1d": (
            lambda x, w, b: tt.conv1d(x, w, b, padding=1),
            lambda r: [n(r, 2, 5, 3), n(r, 3, 3, 4), n(r, 4)],
            (0, 1, 2),
        ),
        "relu": (tt.relu, lambda r: [n(r, 4, 5)], (0,)),
        "softmax": (tt.softmax, lambda r: [n(r, 3, 5)], (0,)),
        "mean": (lambda x: tt.mean(x, axis=-2), lambda r: [n(r, 2, 4, 3)], (0,)),
        "concat": (lambda a, b: tt.concat([a, b], axis=0), lambda r: [n(r, 2, 3), n(r, 4, 3)], (0, 1)),
        "transpose": (tt.transpose, lambda r: [n(r, 2, 3, 4)], (0,)),
        "index": (lambda x: x[np.array([0, 2, 2]), 1:], lambda r: [n(r, 4, 3)], (0,)),
        "sum": (lambda x: tt.sum(x, axis=1), lambda r: [n(r, 3, 4)], (0,)),
        "abs": (tt.abs, lambda r: [n(r, 6)], (0,)),
        "sigmoid": (tt.sigmoid, lambda r: [3 * n(r, 6)], (0,)),
        "log": (tt.log, lambda r: [r.uniform(0.2, 3.0, size=6)], (0,)),
        "reshape": (lambda x: tt.reshape(x, (3, 4)), lambda r: [n(r, 2, 6)], (0,)),
        "clip": (lambda x: tt.clip(x, -0.5, 0.5), lambda r: [n(r, 8)], (0,)),
    }


def check_primitive(name: str, seed: int = 0, points: int = N_POINTS) -> CheckResult:
    cases = _primitive_cases()
    if name not in cases:
        return CheckResult(f"op:{name}", float("inf"), 0, 0, error="no gradient check registered")
    op, sampler, wrt_all = cases[name]
    rng = np.random.default_rng(seed)
    worst, checked, kinks = 0.0, 0, 0
    try:
        for _ in range(points):
            inputs = sampler(rng)
            for wrt in wrt_all:
                err, c, k = _contracted(op, inputs, rng, wrt)
                worst, checked, kinks = max(worst, err), checked + c, kinks + k
    except Exception as exc:  # reported, not raised: the suite must list every op
        return CheckResult(f"op:{name}", float("inf"), checked, kinks, error=repr(exc))
    return CheckResult(f"op:{name}", worst, checked, kinks)


def _params_result(name: str, loss_fn, params: dict[str, Tensor], max_coords: int | None) -> CheckResult:
    try:
        reports = check_parameters(loss_fn, params, eps=1e-5, max_coords=max_coords)
    except Exception as exc:
        return CheckResult(name, float("inf"), 0, 0, error=repr(exc))
    worst = max(r.max_error for r in reports.values())
    return CheckResult(
        name, worst, sum(r.checked for r in reports.values()), sum(len(r.kinks) for r in reports.values())
    )


def _small_molre(d: int = 8, n: int = 3, k: int = 2, rank: int = 2) -> MoLREConfig:
    return MoLREConfig(d=d, n_experts=n, top_k=k, shared_ranks=[rank] * n, task_rank=rank, num_blocks=1)


def component_checks(seed: int = 0, max_coords: int | None = 4) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    d = 8
    cfg = _small_molre(d)
    results = []

    x = Tensor(rng.normal(size=(5, d)))
    expert = init_expert(rng, d, 2)
    cot = Tensor(rng.normal(size=(5, d)))
    results.append(_params_result(
        "component:low_rank_expert",
        lambda: tt.sum(low_rank_expert_forward(x, expert) * cot),
        expert.named_parameters(),
        max_coords,
    ))

    router = init_router(rng, d, 3)
    gcot = Tensor(rng.normal(size=3))
    results.append(_params_result(
        "component:router", lambda: tt.sum(router_gates(x, router) * gcot), router.named_parameters(), max_coords
    ))

    block = init_block(rng, cfg)
    results.append(_params_result(
        "component:molre_layer",
        lambda: tt.sum(molre_layer_forward(x, block, "SA", cfg) * cot),
        block.named_parameters(),
        max_coords,
    ))

    fcfg = FusionConfig(d=d, n_layers=2, d_ff=16)
    fp = init_fusion(rng, fcfg)
    h_t, h_a = Tensor(rng.normal(size=(3, d))), Tensor(rng.normal(size=(4, d)))
    fcot = Tensor(rng.normal(size=2 * d))
    results.append(_params_result(
        "component:fuse", lambda: tt.sum(fuse(h_t, h_a, fp) * fcot), fp.named_parameters(), max_coords
    ))

    results.append(end_to_end_check(seed, max_coords))
    return results


def end_to_end_check(seed: int = 0, max_coords: int | None = 4) -> CheckResult:
    """Joint loss of the full model at d=8, N=3, k=2, L=1 w.r.t. every parameter tensor."""
    rng = np.random.default_rng(seed + 1)
    d = 8
    cfg = MoLREConfig(d=d, n_experts=3, top_k=2, shared_ranks=[2] * 3, task_rank=2, num_blocks=2)
    model = build_variant("mmolre", cfg, FusionConfig(d=d, n_layers=1, d_ff=16), n_classes=6, seed=seed)
    batch = [
        Sample(rng.normal(size=(3, d)), rng.normal(size=(4, d)), rng.uniform(-3, 3), rng.integers(0, 2, size=6))
        for _ in range(2)
    ]
    return _params_result(
        "end_to_end:joint_loss",
        lambda: batch_losses(model, batch)["l_joint"],
        model.named_parameters(),
        max_coords,
    )


def run_suite(scale: str = "small", seed: int = 0) -> list[CheckResult]:
    """``small`` samples a few coordinates per model tensor; ``full`` checks every one."""
    if scale not in ("small", "full"):
        raise ValueError(f"scale must be 'small' or 'full', got {scale!r}")
    results = [check_primitive(name, seed) for name in tt.OP_CATALOG]
    results += component_checks(seed, max_coords=None if scale == "full" else 4)
    return results
