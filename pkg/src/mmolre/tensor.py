"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the primitives the model needs are provided. Each primitive records its
op name on the output tensor; the matching backward rule is looked up in
``BACKWARD_RULES`` when :meth:`Tensor.backward` runs, which keeps the rules
swappable (the gradient-check suite relies on that).

Two optional per-thread monitors hook into the forward pass:

* :func:`count_flops` tallies forward FLOPs (1 multiply-accumulate = 2 FLOPs,
  every other arithmetic scalar op = 1 FLOP, data movement = 0).
* :func:`kink_monitor` records the branch pattern of non-smooth ops so the
  finite-difference checker can skip coordinates that straddle a kink.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""


_state = threading.local()


def _flop_counter():
    return getattr(_state, "flops", None)


def _add_flops(op: str, n: int) -> None:
    counter = _flop_counter()
    if counter is not None:
        counter[op] = counter.get(op, 0) + int(n)


def record_kink(tag: str, pattern) -> None:
    """Append a branch pattern to the active kink monitor, if any."""
    kinks = getattr(_state, "kinks", None)
    if kinks is not None:
        kinks.append((tag, np.asarray(pattern).copy()))


@contextlib.contextmanager
def count_flops():
    """Collect ``{op_name: flops}`` for every primitive run inside the block."""
    prev = _flop_counter()
    counter: dict[str, int] = {}
    _state.flops = counter
    try:
        yield counter
    finally:
        _state.flops = prev


@contextlib.contextmanager
def kink_monitor():
    prev = getattr(_state, "kinks", None)
    kinks: list = []
    _state.kinks = kinks
    try:
        yield kinks
    finally:
        _state.kinks = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_op", "_ctx")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._op: str | None = None
        self._ctx: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self._op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, **ctx) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._op = op
    out._ctx = ctx
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    _add_flops("add", out.size)
    return _make(out, (a, b), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    _add_flops("sub", out.size)
    return _make(out, (a, b), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    _add_flops("mul", out.size)
    return _make(out, (a, b), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c
    _add_flops("scale", out.size)
    return _make(out, (a,), "scale", c=float(c))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand (shapes {a.shape}, {b.shape})")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if inner_a != inner_b:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    out = a.data @ b.data
    _add_flops("matmul", 2 * out.size * inner_a)
    return _make(np.asarray(out, dtype=np.float64), (a, b), "matmul")


def conv1d(x: Tensor, w: Tensor, b: Tensor, padding: int = 0) -> Tensor:
    """Cross-correlation along time. ``x`` is ``[T, C_in]`` or ``[B, T, C_in]``,
    ``w`` is ``[K, C_in, C_out]``, ``b`` is ``[C_out]``."""
    if x.ndim not in (2, 3):
        raise ShapeError(f"conv1d: input must be [T, C_in] or [B, T, C_in], got {x.shape}")
    if w.ndim != 3:
        raise ShapeError(f"conv1d: weight must be [K, C_in, C_out], got {w.shape}")
    K, c_in, c_out = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != weight C_in {c_in}")
    if b.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {b.shape} != (C_out={c_out},)")
    if padding < 0:
        raise ShapeError(f"conv1d: negative padding {padding}")
    T = x.shape[-2]
    t_out = T + 2 * padding - K + 1
    if t_out < 0:
        raise ShapeError(f"conv1d: kernel K={K} longer than padded input T={T}+2*{padding}")
    x3 = x.data if x.ndim == 3 else x.data[None]
    out = _kernels.conv1d_forward(x3, w.data, b.data, padding)
    if x.ndim == 2:
        out = out[0]
    _add_flops("conv1d", x3.shape[0] * t_out * (2 * K * c_in * c_out + c_out))
    return _make(out, (x, w, b), "conv1d", padding=padding)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    record_kink("relu", mask)
    _add_flops("relu", x.size)
    return _make(np.where(mask, x.data, 0.0), (x,), "relu", mask=mask)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    _add_flops("sigmoid", x.size)
    return _make(out, (x,), "sigmoid")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: non-positive input")
    _add_flops("log", x.size)
    return _make(np.log(x.data), (x,), "log")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    record_kink("abs", sign)
    _add_flops("abs", x.size)
    return _make(np.abs(x.data), (x,), "abs", sign=sign)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    record_kink("clip", inside)
    return _make(np.clip(x.data, lo, hi), (x,), "clip", inside=inside)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax: last axis must be nonempty, got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("softmax: non-finite input (NaN or Inf)")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    _add_flops("softmax", x.size)
    return _make(out, (x,), "softmax")


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    if n == 0:
        raise ShapeError(f"mean: axis {axis} of shape {x.shape} is empty")
    _add_flops("mean", x.size)
    return _make(x.data.mean(axis=axis), (x,), "mean", axis=axis)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    _add_flops("sum", x.size)
    return _make(np.asarray(x.data.sum(axis=axis), dtype=np.float64), (x,), "sum", axis=axis)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}: {exc}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _make(out, tensors, "concat", axis=axis, sizes=sizes)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    return _make(np.transpose(x.data, axes), (x,), "transpose", axes=axes)


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    return _make(np.array(out, dtype=np.float64), (x,), "index", idx=idx)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make(out, (x,), "reshape")


# --------------------------------------------------------------------------
# composites
# --------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Single-head scaled dot-product attention, ``softmax(q k^T / sqrt(d)) v``."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores), v)


# --------------------------------------------------------------------------
# backward rules: rule(out, g) -> tuple of parent gradients (None = no grad)
# --------------------------------------------------------------------------


def _bw_add(out, g):
    a, b = out._parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_sub(out, g):
    a, b = out._parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _bw_mul(out, g):
    a, b = out._parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def _bw_scale(out, g):
    return (g * out._ctx["c"],)


def _bw_matmul(out, g):
    a, b = out._parents
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    g2 = g
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(a.shape)
    gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(b.shape)
    return ga, gb


def _bw_conv1d(out, g):
    x, w, _ = out._parents
    x3 = x.data if x.ndim == 3 else x.data[None]
    g3 = g if g.ndim == 3 else g[None]
    gx, gw, gb = _kernels.conv1d_backward(x3, w.data, g3, out._ctx["padding"])
    if x.ndim == 2:
        gx = gx[0]
    return gx, gw, gb


def _bw_relu(out, g):
    return (np.where(out._ctx["mask"], g, 0.0),)


def _bw_sigmoid(out, g):
    s = out.data
    return (g * s * (1.0 - s),)


def _bw_log(out, g):
    return (g / out._parents[0].data,)


def _bw_abs(out, g):
    return (g * out._ctx["sign"],)


def _bw_clip(out, g):
    return (np.where(out._ctx["inside"], g, 0.0),)


def _bw_softmax(out, g):
    s = out.data
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _bw_mean(out, g):
    (x,) = out._parents
    axis = out._ctx["axis"]
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / x.shape[axis],)


def _bw_sum(out, g):
    (x,) = out._parents
    axis = out._ctx["axis"]
    if axis is None:
        return (np.broadcast_to(g, x.shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)


def _bw_concat(out, g):
    splits = np.cumsum(out._ctx["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=out._ctx["axis"]))


def _bw_transpose(out, g):
    return (np.transpose(g, np.argsort(out._ctx["axes"])),)


def _bw_index(out, g):
    (x,) = out._parents
    full = np.zeros_like(x.data)
    np.add.at(full, out._ctx["idx"], g)
    return (full,)


def _bw_reshape(out, g):
    return (g.reshape(out._parents[0].shape),)


BACKWARD_RULES: dict[str, Callable] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "scale": _bw_scale,
    "matmul": _bw_matmul,
    "conv1d": _bw_conv1d,
    "relu": _bw_relu,
    "softmax": _bw_softmax,
    "mean": _bw_mean,
    "concat": _bw_concat,
    "transpose": _bw_transpose,
    "index": _bw_index,
    "sum": _bw_sum,
    "abs": _bw_abs,
    "sigmoid": _bw_sigmoid,
    "log": _bw_log,
    "reshape": _bw_reshape,
    "clip": _bw_clip,
}

OP_CATALOG: tuple[str, ...] = tuple(BACKWARD_RULES)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad = node.grad + g
            continue
        parent_grads = BACKWARD_RULES[node._op](node, g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
