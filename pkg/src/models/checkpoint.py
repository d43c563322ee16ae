"""Checkpoint, shard index and alignment report models."""

import hashlib
import json
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

from src.models.tensor import NamedTensor


def content_digest(tensors: Iterable[NamedTensor]) -> str:
    """
    SHA-256 over every tensor in name order.

    Each tensor contributes its name, dtype code, shape and raw bytes so that
    renaming or reshaping a tensor changes the digest too.
    """
    hasher = hashlib.sha256()
    for tensor in sorted(tensors, key=lambda t: t.name):
        header = json.dumps(
            [tensor.name, tensor.dtype.container_code, list(tensor.shape)],
            separators=(",", ":"),
        )
        hasher.update(header.encode("utf-8"))
        hasher.update(tensor.to_bytes())
    return hasher.hexdigest()


class Checkpoint:
    """An ordered map of tensor name to NamedTensor plus string metadata."""

    def __init__(
        self,
        tensors: Iterable[NamedTensor],
        metadata: Optional[Mapping[str, str]] = None,
    ):
        """
        Initialize a Checkpoint.

        Args:
            tensors: Tensors to hold; stored in lexicographic name order
            metadata: String-to-string metadata map
        """
        by_name: Dict[str, NamedTensor] = {}
        for tensor in tensors:
            if tensor.name in by_name:
                raise ValueError(f"duplicate tensor name '{tensor.name}'")
            by_name[tensor.name] = tensor
        self.tensors: Dict[str, NamedTensor] = {name: by_name[name] for name in sorted(by_name)}
        self.metadata: Dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}
        self._digest: Optional[str] = None

    @property
    def source_digest(self) -> str:
        """Content hash over all tensors in name order (computed once)."""
        if self._digest is None:
            self._digest = content_digest(self.tensors.values())
        return self._digest

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def total_elements(self) -> int:
        return sum(t.numel for t in self.tensors.values())

    @property
    def total_bytes(self) -> int:
        return sum(t.nbytes for t in self.tensors.values())

    def __getitem__(self, name: str) -> NamedTensor:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def __repr__(self) -> str:
        return f"Checkpoint(tensors={len(self)}, elements={self.total_elements})"


class ShardIndex:
    """Manifest mapping each tensor to the shard file that stores it."""

    def __init__(self, weight_map: Mapping[str, str], total_size_bytes: int):
        """
        Initialize a ShardIndex.

        Args:
            weight_map: Tensor name to shard filename (relative to the manifest)
            total_size_bytes: Sum of tensor data bytes across shards
        """
        self.weight_map: Dict[str, str] = dict(weight_map)
        self.total_size_bytes = int(total_size_bytes)

    @property
    def shard_files(self) -> List[str]:
        """Distinct shard filenames in sorted order."""
        return sorted(set(self.weight_map.values()))

    def to_dict(self) -> Dict[str, Any]:
        """Convert to the manifest JSON layout."""
        return {
            "metadata": {"total_size": self.total_size_bytes},
            "weight_map": {name: self.weight_map[name] for name in sorted(self.weight_map)},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ShardIndex":
        """
        Create a ShardIndex from manifest JSON.

        Raises:
            ValueError: if the layout is not {"metadata": {...}, "weight_map": {...}}
        """
        weight_map = data.get("weight_map")
        if not isinstance(weight_map, dict) or not all(
            isinstance(v, str) for v in weight_map.values()
        ):
            raise ValueError("shard index needs a 'weight_map' object of strings")
        metadata = data.get("metadata") or {}
        total = metadata.get("total_size", 0) if isinstance(metadata, dict) else 0
        return cls(weight_map, int(total))


class AlignmentReport:
    """Name/shape comparison between a base (a) and an instruct (b) checkpoint."""

    def __init__(
        self,
        matched: List[str],
        missing_in_a: List[str],
        missing_in_b: List[str],
        shape_mismatches: List[Tuple[str, Tuple[int, ...], Tuple[int, ...]]],
    ):
        """
        Initialize an AlignmentReport.

        Args:
            matched: Names present in both with equal shapes
            missing_in_a: Names only present in b
            missing_in_b: Names only present in a
            shape_mismatches: (name, shape_a, shape_b) for names in both with different shapes
        """
        self.matched = matched
        self.missing_in_a = missing_in_a
        self.missing_in_b = missing_in_b
        self.shape_mismatches = shape_mismatches

    @property
    def diffable(self) -> bool:
        return not (self.missing_in_a or self.missing_in_b or self.shape_mismatches)

    def summary_lines(self) -> List[str]:
        """Human-readable summary for stdout."""
        lines = [
            f"matched: {len(self.matched)}",
            f"missing in base: {len(self.missing_in_a)}",
            f"missing in instruct: {len(self.missing_in_b)}",
            f"shape mismatches: {len(self.shape_mismatches)}",
        ]
        lines.extend(f"  only in instruct: {name}" for name in self.missing_in_a)
        lines.extend(f"  only in base: {name}" for name in self.missing_in_b)
        lines.extend(
            f"  shape: {name} {list(shape_a)} vs {list(shape_b)}"
            for name, shape_a, shape_b in self.shape_mismatches
        )
        return lines

    def to_dict(self) -> Dict[str, Any]:
        return {
            "matched": self.matched,
            "missing_in_a": self.missing_in_a,
            "missing_in_b": self.missing_in_b,
            "shape_mismatches": [
                {"name": name, "shape_a": list(a), "shape_b": list(b)}
                for name, a, b in self.shape_mismatches
            ],
            "diffable": self.diffable,
        }
