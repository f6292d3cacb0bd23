"""Central finite-difference gradient checks against the autograd engine.

Error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
A coordinate is treated as a kink and left out of the maximum when nudging
it by +/-eps flips a ReLU/abs/clip branch or a top-k routing choice; the
central difference is meaningless across such a boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, kink_monitor


@dataclass
class GradCheckReport:
    max_error: float
    checked: int
    kinks: list[int] = field(default_factory=list)
    worst_index: int | None = None


def _same_pattern(a, b) -> bool:
    if len(a) != len(b):
        return False
    for (tag_a, pa), (tag_b, pb) in zip(a, b):
        if tag_a != tag_b or pa.shape != pb.shape or not np.array_equal(pa, pb):
            return False
    return True


def _evaluate(loss_fn: Callable[[], Tensor]):
    with kink_monitor() as kinks:
        value = loss_fn()
    if value.size != 1:
        raise ValueError(f"grad_check: function must be scalar-valued, got shape {value.shape}")
    return float(value.data.reshape(-1)[0]), kinks


def check_tensor(
    loss_fn: Callable[[], Tensor],
    param: Tensor,
    eps: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare ``param.grad`` from one backward pass of ``loss_fn`` with
    central differences over the flat coordinates ``coords`` (all by default).

    ``loss_fn`` is re-invoked with ``param.data`` perturbed in place.
    """
    if eps <= 0:
        raise ValueError(f"grad_check: eps must be positive, got {eps}")
    param.zero_grad()
    with kink_monitor() as base_kinks:
        loss = loss_fn()
    if loss.size != 1:
        raise ValueError(f"grad_check: function must be scalar-valued, got shape {loss.shape}")
    loss.backward()
    analytic = param.grad.reshape(-1).copy()

    flat = param.data.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    worst, worst_i, kinks, checked = 0.0, None, [], 0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        f_plus, k_plus = _evaluate(loss_fn)
        flat[i] = orig - eps
        f_minus, k_minus = _evaluate(loss_fn)
        flat[i] = orig
        if not (_same_pattern(base_kinks, k_plus) and _same_pattern(base_kinks, k_minus)):
            kinks.append(int(i))
            continue
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        checked += 1
        if err > worst or worst_i is None:
            worst, worst_i = max(err, worst), int(i)
    return GradCheckReport(max_error=worst, checked=checked, kinks=kinks, worst_index=worst_i)


def grad_check_report(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> GradCheckReport:
    if not point.requires_grad:
        point = Tensor(point.data, requires_grad=True)
    return check_tensor(lambda: f(point), point, eps)


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-5) -> float:
    """Maximum relative error between autograd and central differences of
    scalar ``f`` at ``point``. ReLU-kink coordinates are excluded."""
    return grad_check_report(f, point, eps).max_error


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, GradCheckReport]:
    """Run :func:`check_tensor` on every named parameter.

    With ``max_coords`` set, each tensor is probed at that many coordinates
    drawn without replacement from a seeded generator.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in params.items():
        coords = None
        if max_coords is not None and p.size > max_coords:
            coords = sorted(rng.choice(p.size, size=max_coords, replace=False).tolist())
        out[name] = check_tensor(loss_fn, p, eps, coords)
    return out
