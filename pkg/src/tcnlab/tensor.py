"""Tensor helpers on top of float64 numpy arrays.

Every numeric value in the package is a C-contiguous ``np.float64`` array.
Shapes are checked explicitly; there is no broadcasting between operands
of the public helpers here.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import GradCheckError, ShapeError

DTYPE = np.float64


def as_tensor(data, shape=None) -> np.ndarray:
    """Convert ``data`` to a contiguous float64 array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(f"extents must be positive, got {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    return arr


def reshape(x: np.ndarray, shape) -> np.ndarray:
    """Reinterpret ``x`` with a new shape without copying or reordering."""
    if not x.flags.c_contiguous:
        raise ShapeError("reshape requires a row-major contiguous tensor")
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {tuple(x.shape)} to {shape}")
    return x.reshape(shape)


def check_shape(x: np.ndarray, shape, name="tensor") -> None:
    """Raise ShapeError unless ``x.shape`` matches ``shape`` (None = any)."""
    if len(x.shape) != len(shape) or any(
        want is not None and got != want for got, want in zip(x.shape, shape)
    ):
        want = tuple("*" if s is None else s for s in shape)
        raise ShapeError(f"{name}: expected shape {want}, got {tuple(x.shape)}")


def elementwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if np.shape(a) != np.shape(b):
        raise ShapeError(
            f"elementwise_add: shape {tuple(np.shape(a))} does not match {tuple(np.shape(b))}"
        )
    return np.add(a, b, dtype=DTYPE)


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored after each coordinate, so
    closures that capture ``x`` see the perturbation.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros_like(x, dtype=DTYPE)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, x.shape)
            raise GradCheckError(f"non-finite function value at coordinate {idx}", coordinate=idx)
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-5,
) -> float:
    """Compare an analytic gradient with central differences.

    Returns the maximum over coordinates of
    ``|a - n| / max(1, |a|, |n|)`` where ``a`` is the analytic and ``n`` the
    numerical derivative. Raises GradCheckError naming the coordinate if
    ``f`` is non-finite at a perturbed point.
    """
    analytic_grad = np.asarray(analytic_grad, dtype=DTYPE)
    if analytic_grad.shape != x.shape:
        raise ShapeError(
            f"grad_check: gradient shape {analytic_grad.shape} does not match input {x.shape}"
        )
    numeric = numerical_gradient(f, x, eps)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic_grad), np.abs(numeric)))
    if numeric.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic_grad - numeric) / denom))
