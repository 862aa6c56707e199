"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


def numerical_grad(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic, numeric, abs_floor: float = 1e-7) -> float:
    """Max elementwise error, relative where it matters, 0 where both are tiny."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.where(diff < abs_floor, 0.0, diff / np.maximum(scale, 1e-300))
    return float(err.max()) if err.size else 0.0


def check_scalar_fn(
    fn: Callable[..., ad.Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    abs_floor: float = 1e-7,
) -> float:
    """Max relative error of ``fn``'s reverse-mode gradient over all inputs.

    ``fn`` maps Tensors to a scalar Tensor.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = fn(*leaves)
        tape.backward(out)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):

        def f():
            return float(fn(*[ad.Tensor(a) for a in arrays]).data)

        num = numerical_grad(f, arr, eps)
        worst = max(worst, relative_error(leaf.grad, num, abs_floor))
    return worst


def check_jacobian(
    fn: Callable[[ad.Tensor], ad.Tensor],
    x: np.ndarray,
    eps: float = 1e-5,
    abs_floor: float = 1e-7,
) -> float:
    """Compare every row of ``d fn(x) / dx`` (one backward pass per output)."""
    x = np.array(x, dtype=np.float64)
    out_size = np.asarray(fn(ad.Tensor(x)).data).size
    worst = 0.0
    for k in range(out_size):

        def component(t, k=k):
            return ad.take(ad.reshape(fn(t), (-1,)), k)

        worst = max(worst, check_scalar_fn(component, [x], eps, abs_floor))
    return worst
