"""Dense float32 tensor helpers.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float32`` in
row-major order. This module only adds the checked operations the rest of
the package relies on.
"""

import numpy as np

DTYPE = np.float32


def as_tensor(x):
    """Return ``x`` as a C-contiguous float32 array with all axes >= 1."""
    arr = np.ascontiguousarray(x, dtype=DTYPE)
    if arr.ndim == 0 or any(n < 1 for n in arr.shape):
        raise ValueError(f"tensor axes must all be >= 1, got shape {arr.shape}")
    return arr


def zeros(shape):
    return np.zeros(shape, dtype=DTYPE)


def elementwise(a, b, op="add"):
    """Exact-shape elementwise ``add`` or ``mul`` (no broadcasting)."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return a + b
    if op == "mul":
        return a * b
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b):
    """Matrix product of ``a[m, k]`` and ``b[k, n]`` with float32 output."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def pad_axis(x, axis, left, right, value=0.0):
    """Pad one axis of ``x`` with ``left``/``right`` copies of ``value``."""
    x = np.asarray(x)
    if not 0 <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for rank {x.ndim}")
    if left < 0 or right < 0:
        raise ValueError("padding amounts must be non-negative")
    if left == 0 and right == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (left, right)
    return np.pad(x, widths, mode="constant", constant_values=value)


def reshape(x, shape):
    x = np.asarray(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return x.reshape(shape)
