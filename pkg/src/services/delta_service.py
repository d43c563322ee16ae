"""RE-Adapter extraction Δ = Θ − Φ and dense adapter application."""

import logging
from collections import namedtuple
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

from src import __version__
from src.models.adapter import AdapterKind, DeltaAdapter
from src.models.checkpoint import Checkpoint
from src.models.errors import DigestMismatch, FormatError, NotDiffable, ShapeMismatch
from src.models.tensor import DType, NamedTensor
from src.services import tensor_ops
from src.services.checkpoint_io import CheckpointStore, validate_pair
from src.services.records_io import write_csv
from src.services.worker_pool import map_ordered

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DeltaStat = namedtuple("DeltaStat", ["name", "delta_norm", "base_norm", "relative"])

RESERVED_KEYS = ("kind", "base_digest", "instruct_digest", "tool_version")


def check_applicable(base: Checkpoint, deltas: Mapping[str, object], label: str):
    """
    Raise ShapeMismatch unless every delta name exists in base with the same shape.

    Args:
        base: Checkpoint the adapter will be added to
        deltas: name → object with a `shape` attribute (NamedTensor or LowRankFactor)
        label: Adapter description for error messages
    """
    for name, tensor in deltas.items():
        if name not in base:
            raise ShapeMismatch(f"{label}: tensor '{name}' does not exist in the base", name=name)
        if tuple(tensor.shape) != base[name].shape:
            raise ShapeMismatch(
                f"{label}: tensor '{name}' has shape {list(tensor.shape)}, "
                f"base has {list(base[name].shape)}",
                name=name,
            )


def check_digest(base: Checkpoint, expected: str, label: str):
    """Raise DigestMismatch unless base is the checkpoint an adapter was built on."""
    if expected != base.source_digest:
        raise DigestMismatch(
            f"{label}: base digest {base.source_digest[:12]} does not match the "
            f"adapter's recorded base {expected[:12] or '<none>'}"
        )


def adapter_metadata(
    kind: AdapterKind, base_digest: str, instruct_digest: str, extra: Mapping[str, str]
) -> Dict[str, str]:
    """Container metadata for a stored adapter; reserved keys win over extras."""
    metadata = {k: v for k, v in extra.items() if k not in RESERVED_KEYS}
    metadata.update(
        {
            "kind": kind.value,
            "base_digest": base_digest,
            "instruct_digest": instruct_digest,
            "tool_version": __version__,
        }
    )
    return metadata


class DeltaService:
    """Service for extracting, applying and storing dense adapters."""

    def __init__(
        self, store: CheckpointStore, threads: Optional[int] = None, progress: bool = False
    ):
        """
        Initialize the delta service.

        Args:
            store: Container reader/writer
            threads: Worker cap for per-tensor work
            progress: Show progress bars
        """
        self.store = store
        self.threads = threads
        self.progress = progress

    def extract(
        self,
        base: Checkpoint,
        instruct: Checkpoint,
        skip_unmatched: bool = False,
        dtype: DType = DType.FLOAT32,
        metadata: Optional[Mapping[str, str]] = None,
    ) -> DeltaAdapter:
        """
        Difference an instruct checkpoint against its pretrained base.

        Args:
            base: Pretrained checkpoint Φ
            instruct: Instruction-tuned checkpoint Θ
            skip_unmatched: Diff the aligned intersection instead of failing
            dtype: Storage dtype of the deltas (float32 unless down-cast)
            metadata: Source identifiers to record on the adapter

        Returns:
            DeltaAdapter over the matched tensors

        Raises:
            NotDiffable: if misaligned and skip_unmatched is False
        """
        report = validate_pair(base, instruct)
        if not report.diffable:
            if not skip_unmatched:
                raise NotDiffable(report)
            logger.warning(
                "diffing %d matched tensors; skipping %d only-in-base, %d only-in-instruct, "
                "%d shape-mismatched",
                len(report.matched),
                len(report.missing_in_b),
                len(report.missing_in_a),
                len(report.shape_mismatches),
            )

        deltas = map_ordered(
            lambda name: tensor_ops.subtract(instruct[name], base[name], dtype),
            report.matched,
            threads=self.threads,
            desc="diff",
            progress=self.progress,
        )
        return DeltaAdapter(
            deltas,
            base_digest=base.source_digest,
            instruct_digest=instruct.source_digest,
            metadata=metadata,
            kind=AdapterKind.RE_ADAPTER,
        )

    def apply(
        self,
        base: Checkpoint,
        delta: DeltaAdapter,
        scale: float,
        verify_digest: bool = False,
    ) -> Checkpoint:
        """
        Partially adapt a base: Ŵ = W + scale·Δ for every tensor Δ covers.

        Args:
            base: Checkpoint to adapt (need not be the extraction base)
            delta: Dense adapter
            scale: Adaptation strength
            verify_digest: Require base to be the adapter's extraction base

        Returns:
            New checkpoint; tensors Δ does not cover pass through unchanged and
            every tensor keeps the base dtype

        Raises:
            ShapeMismatch: if a delta tensor is absent from or shaped unlike the base
            DigestMismatch: if verify_digest and the base digest differs
        """
        check_applicable(base, delta.deltas, delta.kind.value)
        if verify_digest:
            check_digest(base, delta.base_digest, delta.kind.value)

        def adapt(tensor: NamedTensor) -> NamedTensor:
            if tensor.name not in delta.deltas:
                return tensor
            return tensor_ops.add_scaled(tensor, delta[tensor.name], scale)

        adapted = map_ordered(adapt, base.tensors.values(), threads=self.threads)
        return Checkpoint(adapted, base.metadata)

    def stats(self, base: Checkpoint, delta: DeltaAdapter) -> List[DeltaStat]:
        """Per-tensor ‖Δ‖_F, ‖Φ‖_F and their ratio (0 when the base tensor is zero)."""
        rows = []
        for name, tensor in delta.deltas.items():
            delta_norm = tensor_ops.frobenius_norm(tensor)
            base_norm = tensor_ops.frobenius_norm(base[name]) if name in base else 0.0
            relative = delta_norm / base_norm if base_norm > 0 else 0.0
            rows.append(DeltaStat(name, delta_norm, base_norm, relative))
        return rows

    def write_stats(self, path: PathLike, rows: List[DeltaStat]):
        write_csv(
            path,
            ["name", "delta_norm", "base_norm", "relative"],
            ([r.name, repr(r.delta_norm), repr(r.base_norm), repr(r.relative)] for r in rows),
        )

    def save(self, delta: DeltaAdapter, path: PathLike):
        """Write a dense adapter as a container with its provenance metadata."""
        self.store.write_container(
            path,
            list(delta.deltas.values()),
            adapter_metadata(delta.kind, delta.base_digest, delta.instruct_digest, delta.metadata),
        )
        logger.info("saved %s with %d tensors to %s", delta.kind.value, len(delta), path)

    def load(self, path: PathLike) -> DeltaAdapter:
        """
        Read a dense adapter written by save.

        Raises:
            FormatError: if the container is not a dense adapter
        """
        tensors, metadata = self.store.read_container(path)
        kind = metadata.get("kind", AdapterKind.RE_ADAPTER.value)
        if kind not in (AdapterKind.RE_ADAPTER.value, AdapterKind.KNOWLEDGE_ADAPTER.value):
            raise FormatError(f"{path}: expected a dense adapter, found kind '{kind}'")
        extra = {k: v for k, v in metadata.items() if k not in RESERVED_KEYS}
        return DeltaAdapter(
            tensors,
            base_digest=metadata.get("base_digest", ""),
            instruct_digest=metadata.get("instruct_digest", ""),
            metadata=extra,
            kind=AdapterKind(kind),
        )
