"""Partial-adaptation composition Ω = Φ + αΨ + βΔ and (α, β) sweeps."""

import logging
from collections import namedtuple
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src.models.adapter import AdapterKind, DeltaAdapter, LoreAdapter
from src.models.checkpoint import Checkpoint
from src.models.errors import ScaleOutOfRange
from src.models.recipe import MergeRecipe, MergeTerm, TermKind
from src.models.tensor import DType, NamedTensor
from src.services import tensor_ops
from src.services.checkpoint_io import CheckpointStore
from src.services.delta_service import DeltaService, check_applicable, check_digest
from src.services.records_io import write_csv
from src.services.spectra_service import SpectraService, materialize
from src.services.worker_pool import map_ordered

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_SCALE = 0.5
MANIFEST_FILENAME = "sweep_manifest.csv"

SweepPoint = namedtuple("SweepPoint", ["alpha", "beta", "path", "tensor_count", "digest"])


def check_grid(name: str, grid: Sequence[float], allow_extrapolation: bool):
    """
    Reject sweep strengths outside [0, 1] unless extrapolation is allowed.

    Args:
        name: Grid label used in the message ("alpha" or "beta")
        grid: Strengths to check
        allow_extrapolation: Skip the check

    Raises:
        ScaleOutOfRange: naming the first offending value
    """
    if allow_extrapolation:
        return
    for value in grid:
        if not 0.0 <= value <= 1.0:
            raise ScaleOutOfRange(
                f"{name}={value} is outside [0, 1]; pass --allow-extrapolation to use it"
            )


def sweep_filename(alpha: float, beta: float) -> str:
    return f"alpha_{alpha:g}_beta_{beta:g}.safetensors"


class MergeService:
    """Service for composing adapters into a base checkpoint."""

    def __init__(
        self,
        store: CheckpointStore,
        delta_service: DeltaService,
        spectra_service: SpectraService,
        threads: Optional[int] = None,
        progress: bool = False,
    ):
        """
        Initialize the merge service.

        Args:
            store: Checkpoint reader/writer
            delta_service: Loads dense adapters
            spectra_service: Loads LoRE-Adapters
            threads: Worker cap for per-tensor work
            progress: Show progress bars
        """
        self.store = store
        self.delta_service = delta_service
        self.spectra_service = spectra_service
        self.threads = threads
        self.progress = progress

    def term_kind(self, path: PathLike) -> TermKind:
        """Storage form of an adapter file, read from its container metadata."""
        kind = self.store.read_metadata(path).get("kind")
        return TermKind.LORE if kind == AdapterKind.LORE_ADAPTER.value else TermKind.DENSE_DELTA

    def load_adapter(self, path: PathLike) -> Union[DeltaAdapter, LoreAdapter]:
        """Load any stored adapter, dispatching on its "kind" metadata."""
        if self.term_kind(path) is TermKind.LORE:
            return self.spectra_service.load_lore(path)
        return self.delta_service.load(path)

    def load_term_adapter(self, term: MergeTerm) -> DeltaAdapter:
        """Load a recipe term's adapter, materializing LoRE factors to dense."""
        if term.kind is TermKind.LORE:
            return materialize(self.spectra_service.load_lore(term.path))
        return self.delta_service.load(term.path)

    def compose_adapters(
        self,
        base: Checkpoint,
        terms: Sequence[Tuple[DeltaAdapter, float]],
        dtype: Optional[DType] = None,
        verify_digests: bool = False,
    ) -> Checkpoint:
        """
        Add scaled dense adapters to a base in one float32 accumulation pass.

        Args:
            base: Checkpoint Φ
            terms: (adapter, scale) pairs; zero-scale terms contribute nothing
            dtype: Output dtype; None keeps each base tensor's dtype
            verify_digests: Require every adapter's recorded base digest to match Φ

        Returns:
            Ω; tensors no non-zero term touches pass through bitwise (unless re-cast)

        Raises:
            ShapeMismatch: if an adapter tensor is absent from or shaped unlike the base
            DigestMismatch: if verify_digests and a digest differs
        """
        for adapter, _ in terms:
            check_applicable(base, adapter.deltas, adapter.kind.value)
            if verify_digests:
                check_digest(base, adapter.base_digest, adapter.kind.value)
        active = [(adapter, scale) for adapter, scale in terms if scale != 0]

        def compose_tensor(tensor: NamedTensor) -> NamedTensor:
            target = dtype or tensor.dtype
            contributions = [(a[tensor.name], s) for a, s in active if tensor.name in a.deltas]
            if not contributions:
                return tensor_ops.cast(tensor, target)
            accumulator = tensor.to_float32()
            for delta, scale in contributions:
                accumulator += np.float32(scale) * delta.to_float32()
            return NamedTensor.from_values(tensor.name, accumulator, target)

        composed = map_ordered(
            compose_tensor,
            base.tensors.values(),
            threads=self.threads,
            desc="compose",
            progress=self.progress,
        )
        return Checkpoint(composed, base.metadata)

    def compose(self, recipe: MergeRecipe) -> Checkpoint:
        """
        Build the checkpoint a recipe describes.

        LoRE terms are materialized on the fly; scales are applied here only and
        never stored in adapters.
        """
        base = self.store.load(recipe.base)
        terms = [(self.load_term_adapter(term), term.scale) for term in recipe.terms]
        for term in recipe.terms:
            logger.info("term %s (%s) at scale %s", term.path, term.kind.value, term.scale)
        return self.compose_adapters(
            base, terms, dtype=recipe.dtype, verify_digests=recipe.verify_digests
        )

    def sweep(
        self,
        base: Checkpoint,
        knowledge: Optional[DeltaAdapter],
        re_adapter: Optional[DeltaAdapter],
        alpha_grid: Sequence[float],
        beta_grid: Sequence[float],
        out_dir: PathLike,
        dtype: Optional[DType] = None,
        allow_extrapolation: bool = False,
        verify_digests: bool = False,
    ) -> List[SweepPoint]:
        """
        Write Ω(α, β) = Φ + αΨ + βΔ for every grid pair plus a manifest CSV.

        With Ψ absent only α = 0 is meaningful and the α grid collapses to [0];
        likewise for Δ and β.

        Returns:
            One SweepPoint per written checkpoint, α-major order
        """
        out_dir = Path(out_dir)
        alphas = list(alpha_grid) if knowledge is not None else [0.0]
        betas = list(beta_grid) if re_adapter is not None else [0.0]
        if knowledge is None and any(a != 0 for a in alpha_grid):
            logger.warning("no knowledge adapter given; ignoring alpha grid %s", list(alpha_grid))
        if re_adapter is None and any(b != 0 for b in beta_grid):
            logger.warning("no RE-Adapter given; ignoring beta grid %s", list(beta_grid))
        check_grid("alpha", alphas, allow_extrapolation)
        check_grid("beta", betas, allow_extrapolation)

        points = []
        for alpha in alphas:
            for beta in betas:
                terms = []
                if knowledge is not None:
                    terms.append((knowledge, alpha))
                if re_adapter is not None:
                    terms.append((re_adapter, beta))
                merged = self.compose_adapters(
                    base, terms, dtype=dtype, verify_digests=verify_digests
                )
                filename = sweep_filename(alpha, beta)
                self.store.save(merged, out_dir / filename)
                points.append(SweepPoint(alpha, beta, filename, len(merged), merged.source_digest))
                logger.info("alpha=%g beta=%g -> %s", alpha, beta, filename)

        write_csv(
            out_dir / MANIFEST_FILENAME,
            ["alpha", "beta", "path", "tensor_count", "digest"],
            ([repr(p.alpha), repr(p.beta), p.path, p.tensor_count, p.digest] for p in points),
        )
        return points
