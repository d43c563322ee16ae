"""Dense tensor data model."""

from enum import Enum
from math import prod
from typing import Any, Dict, Optional, Sequence, Tuple

import ml_dtypes
import numpy as np


class DType(str, Enum):
    """Storage dtype of a tensor."""
    FLOAT32 = "float32"
    FLOAT16 = "float16"
    BFLOAT16 = "bfloat16"

    @property
    def byte_width(self) -> int:
        """Bytes per element on disk and in memory."""
        return 4 if self is DType.FLOAT32 else 2

    @property
    def container_code(self) -> str:
        """Dtype string used in the container header."""
        return _CONTAINER_CODES[self]

    @property
    def storage(self) -> np.dtype:
        """numpy dtype of the in-memory buffer."""
        return _STORAGE[self]

    @classmethod
    def from_container_code(cls, code: str) -> "DType":
        """
        Resolve a container dtype string.

        Raises:
            ValueError: if the code is not one of F32, F16, BF16
        """
        for dtype, known in _CONTAINER_CODES.items():
            if known == code:
                return dtype
        raise ValueError(f"unsupported dtype '{code}'")


_CONTAINER_CODES = {
    DType.FLOAT32: "F32",
    DType.FLOAT16: "F16",
    DType.BFLOAT16: "BF16",
}

_STORAGE = {
    DType.FLOAT32: np.dtype("<f4"),
    DType.FLOAT16: np.dtype("<f2"),
    DType.BFLOAT16: np.dtype(ml_dtypes.bfloat16),
}


class NamedTensor:
    """A named, shaped, dtype-tagged dense array; immutable once built."""

    def __init__(
        self,
        name: str,
        dtype: DType,
        data: np.ndarray,
        shape: Optional[Sequence[int]] = None,
    ):
        """
        Initialize a NamedTensor.

        Args:
            name: Tensor name (non-empty)
            dtype: Storage dtype
            data: Buffer in the dtype's storage form (bfloat16 via ml_dtypes)
            shape: Logical shape; defaults to data.shape
        """
        self.name = name
        self.dtype = DType(dtype)
        self.shape: Tuple[int, ...] = tuple(int(d) for d in (data.shape if shape is None else shape))

        buffer = np.ascontiguousarray(data)
        if buffer.dtype != self.dtype.storage:
            raise ValueError(
                f"tensor '{name}': buffer dtype {buffer.dtype} does not match {self.dtype.value}"
            )
        self._validate(buffer)
        self.data = buffer.reshape(self.shape)
        self.data.flags.writeable = False

    def _validate(self, buffer: np.ndarray):
        """Validate tensor data."""
        if not self.name:
            raise ValueError("Tensor name must be non-empty")
        if any(d <= 0 for d in self.shape):
            raise ValueError(f"tensor '{self.name}': shape {list(self.shape)} has non-positive dims")
        if prod(self.shape) != buffer.size:
            raise ValueError(
                f"tensor '{self.name}': shape {list(self.shape)} needs {prod(self.shape)} "
                f"elements, buffer has {buffer.size}"
            )

    @classmethod
    def from_values(
        cls, name: str, values: Any, dtype: DType = DType.FLOAT32
    ) -> "NamedTensor":
        """Build a tensor from real values, rounding to nearest even in the target dtype."""
        array = np.asarray(values, dtype=np.float32)
        dtype = DType(dtype)
        return cls(name, dtype, array.astype(dtype.storage))

    @classmethod
    def from_bytes(
        cls, name: str, dtype: DType, shape: Sequence[int], raw: bytes
    ) -> "NamedTensor":
        """Decode a little-endian raw buffer."""
        dtype = DType(dtype)
        buffer = np.frombuffer(raw, dtype=dtype.storage).copy()
        return cls(name, dtype, buffer, shape=shape)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def numel(self) -> int:
        return prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.byte_width

    def to_float32(self) -> np.ndarray:
        """Values widened to float32 (a fresh, writable array)."""
        return self.data.astype(np.float32)

    def to_bytes(self) -> bytes:
        """Raw little-endian buffer in row-major order."""
        return self.data.tobytes(order="C")

    def renamed(self, name: str) -> "NamedTensor":
        """Same buffer under another name."""
        return NamedTensor(name, self.dtype, self.data)

    def bitwise_equal(self, other: "NamedTensor") -> bool:
        """True when dtype, shape and every stored bit agree."""
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.to_bytes() == other.to_bytes()
        )

    def to_dict(self) -> Dict[str, Any]:
        """Header view of the tensor (no data)."""
        return {"name": self.name, "dtype": self.dtype.value, "shape": list(self.shape)}

    def __repr__(self) -> str:
        return f"NamedTensor(name='{self.name}', shape={list(self.shape)}, dtype={self.dtype.value})"
