"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

Operations record themselves on the active :class:`Tape` (define-by-run).
Outside a ``with Tape():`` block every op is plain numpy math and nothing
is recorded, so inference code can share the same functions.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "UsageError",
    "Tensor",
    "Parameter",
    "Tape",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "tsum",
    "reshape",
    "concat",
    "take",
    "relu",
    "sigmoid",
    "softmax",
    "sin",
    "cos",
    "conv2d",
    "mse_loss",
    "square_sum",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised on misuse of the tape (e.g. backward without a forward)."""


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


_param_ids = itertools.count()


class Parameter(Tensor):
    """A learnable leaf tensor with a unique identifier."""

    __slots__ = ("name",)

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True)
        self.name = name if name is not None else f"param{next(_param_ids)}"
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Use as a context manager; ops executed inside the block are recorded and
    :meth:`backward` replays them in reverse. Tapes are thread-confined.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._ops.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` of every tracked leaf reachable from ``loss``."""
        if not self._ops:
            raise UsageError("backward called without a recorded forward pass")
        if loss.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, vjp in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp._leaf:
                    leaves[key] = inp
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in leaves.items():
            leaf.grad = np.array(grads[key], dtype=np.float64).reshape(leaf.shape)
        self._ops = []

    @staticmethod
    def zero_grad(params: Sequence[Tensor]) -> None:
        for p in params:
            p.grad = np.zeros_like(p.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def tsum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _result(data, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in ts]} ({exc})") from None
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(data, ts, vjp)


def take(a, index) -> Tensor:
    """Basic/advanced indexing with a scatter-add backward."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(a.data[index]), (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.shape[axis] < 1:
        raise DimensionError("softmax: empty axis")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (a,), vjp)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # x: (B, C, H, W) -> (B, Ho, Wo, C, k, k) view
    b, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sb, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x,
        shape=(b, ho, wo, c, k, k),
        strides=(sb, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``(C,H,W)`` or ``(B,C,H,W)`` input."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be positive, got {stride}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks {x.shape} / {kernels.shape}")
    o, c, k, k2 = kernels.shape
    if k != k2:
        raise DimensionError(f"conv2d: only square kernels supported, got {kernels.shape}")
    if xd.shape[1] != c:
        raise DimensionError(f"conv2d: input channels {xd.shape[1]} != kernel channels {c}")
    if k > xd.shape[2] or k > xd.shape[3]:
        raise DimensionError(f"conv2d: kernel {kernels.shape} larger than input {x.shape}")
    xd = np.ascontiguousarray(xd)
    cols = _im2col(xd, k, stride)
    kd = kernels.data
    out = np.einsum("bhwcij,ocij->bohw", cols, kd, optimize=True)

    def vjp(g):
        g4 = g[None] if single else g
        gk = np.einsum("bohw,bhwcij->ocij", g4, cols, optimize=True)
        gcols = np.einsum("bohw,ocij->bhwcij", g4, kd, optimize=True)
        gx = np.zeros_like(xd)
        ho, wo = g4.shape[2], g4.shape[3]
        for i in range(k):
            for j in range(k):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        return (gx[0] if single else gx, gk)

    return _result(out[0] if single else out, (x, kernels), vjp)


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _result(
        np.asarray(np.mean(diff * diff)),
        (pred, target),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )


def square_sum(a) -> Tensor:
    """Sum of squared entries (the L2 regularizer)."""
    a = as_tensor(a)
    d = a.data
    return _result(np.asarray(np.sum(d * d)), (a,), lambda g: (2.0 * g * d,))
