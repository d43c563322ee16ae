"""Elementwise and norm arithmetic on NamedTensors.

All arithmetic accumulates in float32 regardless of the storage dtype and
norms accumulate in float64. Results are rounded once, on store.
"""

from typing import Optional

import numpy as np

from src.models.errors import ShapeMismatch
from src.models.tensor import DType, NamedTensor


def _require_same_shape(a: NamedTensor, b: NamedTensor):
    if a.shape != b.shape:
        raise ShapeMismatch(
            f"shape mismatch for '{a.name}': {list(a.shape)} vs {list(b.shape)} ('{b.name}')",
            name=a.name,
        )


def add_scaled(a: NamedTensor, b: NamedTensor, scale: float) -> NamedTensor:
    """
    Compute a + scale·b elementwise.

    Args:
        a: Base tensor; the result keeps its name and dtype
        b: Tensor to add, same shape as a
        scale: Strength applied to b

    Returns:
        New tensor in a.dtype

    Raises:
        ShapeMismatch: if the shapes differ
    """
    _require_same_shape(a, b)
    if scale == 0:
        # x + 0·y may flip -0.0 or propagate NaN from y; zero strength is the identity
        return cast(a, a.dtype)
    result = a.to_float32() + np.float32(scale) * b.to_float32()
    return NamedTensor.from_values(a.name, result, a.dtype)


def subtract(
    a: NamedTensor, b: NamedTensor, dtype: DType = DType.FLOAT32
) -> NamedTensor:
    """
    Compute a − b elementwise in float32.

    Args:
        a: Minuend; the result keeps its name
        b: Subtrahend, same shape as a
        dtype: Storage dtype of the result (float32 unless down-cast is requested)

    Raises:
        ShapeMismatch: if the shapes differ
    """
    _require_same_shape(a, b)
    return NamedTensor.from_values(a.name, a.to_float32() - b.to_float32(), dtype)


def frobenius_norm(t: NamedTensor) -> float:
    """sqrt(Σ t[i]²) accumulated in float64."""
    values = t.to_float32().astype(np.float64).ravel()
    return float(np.sqrt(np.dot(values, values)))


def cast(t: NamedTensor, dtype: DType) -> NamedTensor:
    """
    Round a tensor to another storage dtype.

    Rounding is IEEE round-to-nearest, ties-to-even; values beyond the target
    range become ±infinity and infinities are preserved.
    """
    dtype = DType(dtype)
    if dtype == t.dtype:
        return NamedTensor(t.name, t.dtype, t.data)
    return NamedTensor.from_values(t.name, t.to_float32(), dtype)


def zeros_like(t: NamedTensor, dtype: Optional[DType] = None) -> NamedTensor:
    """All-zero tensor with t's name and shape."""
    return NamedTensor.from_values(
        t.name, np.zeros(t.shape, dtype=np.float32), dtype or t.dtype
    )
