"""Singular value analysis of delta tensors and LoRE-Adapter compression.

Every 2-D delta is factored on its own: the rank kept for a tensor is the
smallest k whose cumulative explained variance reaches the threshold tau.
"""

import hashlib
import json
import logging
import re
from collections import namedtuple
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.utils.extmath import randomized_svd

from src.models.adapter import AdapterKind, DeltaAdapter, LoreAdapter, LowRankFactor
from src.models.checkpoint import Checkpoint
from src.models.errors import AllZero, ConvergenceFailure, FormatError, ShapeMismatch, UsageError
from src.models.tensor import DType, NamedTensor
from src.services.checkpoint_io import CheckpointStore
from src.services.delta_service import RESERVED_KEYS, adapter_metadata
from src.services.records_io import write_csv
from src.services.worker_pool import map_ordered

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DENSE_SVD_LIMIT = 1024
OVERSAMPLES = 10
POWER_ITERATIONS = 2
INITIAL_RANDOMIZED_RANK = 64

FACTOR_A_SUFFIX = ".lore_a"
FACTOR_B_SUFFIX = ".lore_b"

SvdResult = namedtuple("SvdResult", ["u", "s", "vt"])

Spectrum = namedtuple("Spectrum", ["tensor_name", "singular_values", "cumulative_variance"])

ParamReport = namedtuple(
    "ParamReport", ["lore_params", "base_params", "percent", "factored", "dense"]
)

SpectrumSummary = namedtuple(
    "SpectrumSummary", ["name", "rows", "cols", "rank_at_tau", "retained"]
)


def tensor_seed(seed: int, name: str) -> int:
    """Per-tensor seed derived from (global seed, tensor name)."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def _as_matrix(tensor: NamedTensor) -> np.ndarray:
    if tensor.ndim != 2:
        raise ShapeMismatch(
            f"tensor '{tensor.name}' has shape {list(tensor.shape)}; SVD needs a matrix",
            name=tensor.name,
        )
    matrix = tensor.to_float32().astype(np.float64)
    if not np.isfinite(matrix).all():
        raise ConvergenceFailure(tensor.name, "matrix has non-finite entries")
    return matrix


def svd(matrix: NamedTensor) -> SvdResult:
    """
    Thin SVD of a 2-D tensor in float64.

    Returns:
        (U, S, Vt) with S descending, U·diag(S)·Vt reconstructing the input

    Raises:
        ShapeMismatch: if the tensor is not 2-D
        ConvergenceFailure: if LAPACK does not converge
    """
    values = _as_matrix(matrix)
    return _dense_svd(matrix.name, values)


def _dense_svd(name: str, values: np.ndarray) -> SvdResult:
    try:
        u, s, vt = np.linalg.svd(values, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise ConvergenceFailure(name, str(e)) from e
    return SvdResult(u, s, vt)


def _randomized(name: str, values: np.ndarray, rank: int, seed: int) -> SvdResult:
    try:
        u, s, vt = randomized_svd(
            values,
            n_components=rank,
            n_oversamples=OVERSAMPLES,
            n_iter=POWER_ITERATIONS,
            random_state=tensor_seed(seed, name),
        )
    except np.linalg.LinAlgError as e:
        raise ConvergenceFailure(name, str(e)) from e
    return SvdResult(u, s, vt)


def explained_variance(
    singular_values: Sequence[float], total_energy: Optional[float] = None
) -> np.ndarray:
    """
    Cumulative explained variance v_k = Σ_{i≤k} σ_i² / Σ_j σ_j² for k = 1..len(S).

    Args:
        singular_values: Non-negative, descending
        total_energy: Σ_j σ_j² over the full spectrum when only the leading
            values are given (e.g. ‖Δ‖_F²); defaults to the sum over the values

    Raises:
        AllZero: if every singular value is zero
    """
    s = np.asarray(singular_values, dtype=np.float64)
    cumulative = np.cumsum(s * s)
    if cumulative.size == 0 or cumulative[-1] <= 0.0:
        raise AllZero("explained variance is undefined for an all-zero spectrum")
    if total_energy is None:
        return cumulative / cumulative[-1]
    return np.minimum(cumulative / total_energy, 1.0)


def validate_tau(tau: float):
    """
    Check an explained-variance threshold.

    Raises:
        UsageError: if tau is outside (0, 1]
    """
    if not 0.0 < tau <= 1.0:
        raise UsageError(f"tau must be in (0, 1], got {tau}")


def select_rank(cumulative_variance: Sequence[float], tau: float) -> int:
    """
    Smallest k ≥ 1 with v_k ≥ tau (k is 1-indexed; v_0 = 0).

    When the curve never reaches tau (a truncated spectrum) the full length
    is returned.
    """
    validate_tau(tau)
    v = np.asarray(cumulative_variance, dtype=np.float64)
    k = int(np.searchsorted(v, tau, side="left")) + 1
    return min(k, len(v))


def max_useful_rank(rows: int, cols: int) -> int:
    """Largest k with k(m+n) < mn, i.e. factors strictly smaller than dense."""
    return (rows * cols - 1) // (rows + cols)


def spectrum(
    tensor: NamedTensor, dense_svd_limit: int = DENSE_SVD_LIMIT, seed: int = 0
) -> Spectrum:
    """
    Singular values and explained-variance curve of one delta matrix.

    Above dense_svd_limit only the leading dense_svd_limit values are
    computed (randomized); the curve is still normalized by ‖Δ‖_F² so it
    ends below 1 when the tail carries variance.
    """
    values = _as_matrix(tensor)
    total = float(np.sum(values * values))
    if min(values.shape) <= dense_svd_limit:
        s = _dense_svd(tensor.name, values).s
        return Spectrum(tensor.name, s, explained_variance(s))
    s = _randomized(tensor.name, values, dense_svd_limit, seed).s
    return Spectrum(tensor.name, s, explained_variance(s, total_energy=total))


def _truncate(svd_result: SvdResult, k: int) -> Tuple[np.ndarray, np.ndarray]:
    root = np.sqrt(svd_result.s[:k])
    factor_b = svd_result.u[:, :k] * root
    factor_a = root[:, None] * svd_result.vt[:k]
    return factor_b, factor_a


def _factor_tensor(
    tensor: NamedTensor,
    tau: float,
    min_dim: int,
    storage_guard: bool,
    dense_svd_limit: int,
    seed: int,
) -> Optional[LowRankFactor]:
    """Low-rank factor for one delta, or None when it should stay dense."""
    if tensor.ndim != 2 or min(tensor.shape) < min_dim:
        return None
    rows, cols = tensor.shape
    rank_cap = max_useful_rank(rows, cols) if storage_guard else min(rows, cols)
    if rank_cap < 1:
        return None
    values = _as_matrix(tensor)
    total = float(np.sum(values * values))
    if total == 0.0:
        logger.debug("tensor '%s' is all zero; kept dense", tensor.name)
        return None

    result = None
    if min(rows, cols) > dense_svd_limit:
        randomized_cap = rank_cap if storage_guard else min(rows, cols) // 2
        rank = min(INITIAL_RANDOMIZED_RANK, randomized_cap)
        while result is None:
            candidate = _randomized(tensor.name, values, rank, seed)
            v = explained_variance(candidate.s, total_energy=total)
            if v[-1] >= tau:
                result = candidate
            elif rank < randomized_cap:
                rank = min(rank * 2, randomized_cap)
            elif storage_guard:
                # even the largest rank worth storing misses tau
                return None
            else:
                break
    if result is None:
        result = _dense_svd(tensor.name, values)
        v = explained_variance(result.s)

    k = select_rank(v, tau)
    if storage_guard and k * (rows + cols) >= rows * cols:
        return None
    factor_b, factor_a = _truncate(result, k)
    return LowRankFactor(tensor.name, factor_b, factor_a, float(v[k - 1]))


def materialize(lore: LoreAdapter) -> DeltaAdapter:
    """Expand every factor pair to a dense float32 matrix B·A."""
    deltas = list(lore.dense.values())
    for factor in lore.factors.values():
        product = factor.factor_b.astype(np.float64) @ factor.factor_a.astype(np.float64)
        deltas.append(NamedTensor.from_values(factor.name, product))
    metadata = {k: v for k, v in lore.metadata.items() if k != "source_kind"}
    kind = lore.metadata.get("source_kind", AdapterKind.RE_ADAPTER.value)
    return DeltaAdapter(
        deltas,
        base_digest=lore.base_digest,
        instruct_digest=lore.instruct_digest,
        metadata=metadata,
        kind=AdapterKind(kind),
    )


def param_report(lore: LoreAdapter, base: Checkpoint) -> ParamReport:
    """
    LoRE parameter count Σ k(m+n) + Σ dense elements, and its percentage of
    the base's element count. Dense 1-D tensors are counted.
    """
    lore_params = lore.param_count
    base_params = base.total_elements
    percent = 100.0 * lore_params / base_params if base_params else 0.0
    return ParamReport(lore_params, base_params, percent, len(lore.factors), len(lore.dense))


class _TensorCurve:
    """Explained-variance curve of one tensor, reused across a tau sweep."""

    def __init__(self, numel: int, shape: Tuple[int, ...], variance: Optional[np.ndarray]):
        self.numel = numel
        self.shape = shape
        self.variance = variance

    def params_at(self, tau: float, storage_guard: bool) -> int:
        if self.variance is None or self.variance[-1] < tau:
            return self.numel
        rows, cols = self.shape
        k = select_rank(self.variance, tau)
        if storage_guard and k * (rows + cols) >= rows * cols:
            return self.numel
        return k * (rows + cols)


def _curve(
    tensor: NamedTensor, min_dim: int, storage_guard: bool, dense_svd_limit: int, seed: int
) -> _TensorCurve:
    if tensor.ndim != 2 or min(tensor.shape) < min_dim:
        return _TensorCurve(tensor.numel, tensor.shape, None)
    rows, cols = tensor.shape
    values = _as_matrix(tensor)
    total = float(np.sum(values * values))
    if total == 0.0:
        return _TensorCurve(tensor.numel, tensor.shape, None)
    if min(rows, cols) <= dense_svd_limit:
        s = _dense_svd(tensor.name, values).s
        return _TensorCurve(tensor.numel, tensor.shape, explained_variance(s))
    rank_cap = max_useful_rank(rows, cols) if storage_guard else min(rows, cols)
    s = _randomized(tensor.name, values, max(rank_cap, 1), seed).s
    return _TensorCurve(tensor.numel, tensor.shape, explained_variance(s, total_energy=total))


def default_tau_grid() -> List[float]:
    return [round(0.05 * i, 2) for i in range(1, 21)]


def write_spectrum(path: PathLike, curve: Spectrum):
    """CSV with columns index,variance; row 0 is v_0 = 0."""
    rows = [[0, repr(0.0)]]
    rows.extend([i, repr(float(v))] for i, v in enumerate(curve.cumulative_variance, start=1))
    write_csv(path, ["index", "variance"], rows)


def spectrum_filename(name: str) -> str:
    """Tensor name made safe for a file name."""
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name) + ".csv"


class SpectraService:
    """Service for spectral reports and LoRE-Adapter compression."""

    def __init__(
        self,
        store: CheckpointStore,
        seed: int = 0,
        dense_svd_limit: int = DENSE_SVD_LIMIT,
        threads: Optional[int] = None,
        progress: bool = False,
    ):
        """
        Initialize the spectra service.

        Args:
            store: Container reader/writer
            seed: Global seed for the randomized SVD
            dense_svd_limit: Largest min(m, n) handled by the exact dense SVD
            threads: Worker cap for per-tensor work
            progress: Show progress bars
        """
        self.store = store
        self.seed = seed
        self.dense_svd_limit = dense_svd_limit
        self.threads = threads
        self.progress = progress

    def compress(
        self,
        delta: DeltaAdapter,
        tau: float,
        min_dim: int = 2,
        storage_guard: bool = True,
    ) -> LoreAdapter:
        """
        Convert a dense adapter into a LoRE-Adapter.

        Args:
            delta: Dense adapter to compress
            tau: Explained-variance threshold in (0, 1], applied per tensor
            min_dim: Smallest min(m, n) eligible for factoring
            storage_guard: Keep a tensor dense when k(m+n) ≥ mn

        Returns:
            LoreAdapter with factors for compressed matrices and everything else dense

        Raises:
            UsageError: if tau is outside (0, 1]
            ConvergenceFailure: naming the tensor whose SVD failed
        """
        validate_tau(tau)
        tensors = list(delta.deltas.values())
        factors = map_ordered(
            lambda t: _factor_tensor(
                t, tau, min_dim, storage_guard, self.dense_svd_limit, self.seed
            ),
            tensors,
            threads=self.threads,
            desc="compress",
            progress=self.progress,
        )
        kept = [f for f in factors if f is not None]
        dense = [t for t, f in zip(tensors, factors) if f is None]
        logger.info("tau=%s: %d tensors factored, %d kept dense", tau, len(kept), len(dense))
        metadata = dict(delta.metadata)
        metadata["source_kind"] = delta.kind.value
        return LoreAdapter(
            kept,
            dense,
            tau,
            base_digest=delta.base_digest,
            instruct_digest=delta.instruct_digest,
            metadata=metadata,
        )

    def param_sweep(
        self,
        delta: DeltaAdapter,
        base: Checkpoint,
        taus: Optional[Sequence[float]] = None,
        min_dim: int = 2,
        storage_guard: bool = True,
    ) -> List[Tuple[float, float]]:
        """
        Percent of base parameters a LoRE-Adapter needs at each tau.

        Spectra are computed once per tensor and reused for every tau.

        Returns:
            (tau, percent) rows in ascending tau order
        """
        taus = sorted(taus or default_tau_grid())
        for tau in taus:
            validate_tau(tau)
        curves = map_ordered(
            lambda t: _curve(t, min_dim, storage_guard, self.dense_svd_limit, self.seed),
            list(delta.deltas.values()),
            threads=self.threads,
            desc="spectra",
            progress=self.progress,
        )
        base_params = base.total_elements
        rows = []
        for tau in taus:
            params = sum(curve.params_at(tau, storage_guard) for curve in curves)
            rows.append((tau, 100.0 * params / base_params if base_params else 0.0))
        return rows

    def write_param_sweep(self, path: PathLike, rows: List[Tuple[float, float]]):
        """Write (tau, percent) rows from param_sweep as a tau,percent CSV."""
        write_csv(path, ["tau", "percent"], ([repr(t), repr(p)] for t, p in rows))

    def spectrum_reports(
        self,
        delta: DeltaAdapter,
        out_dir: PathLike,
        layers: Optional[Sequence[str]] = None,
        tau: float = 0.5,
    ) -> List[SpectrumSummary]:
        """
        Write one index,variance CSV per selected 2-D tensor plus
        spectrum_summary.csv (name,rows,cols,rank_at_tau,retained).

        Args:
            delta: Adapter whose tensors to analyse
            out_dir: Output directory
            layers: Substring patterns; a tensor is selected when its name contains any
            tau: Threshold reported in the summary
        """
        validate_tau(tau)
        out_dir = Path(out_dir)
        selected = [
            t
            for t in delta.deltas.values()
            if t.ndim == 2 and (not layers or any(p in t.name for p in layers))
        ]

        def analyse(tensor: NamedTensor) -> Optional[SpectrumSummary]:
            try:
                curve = spectrum(tensor, dense_svd_limit=self.dense_svd_limit, seed=self.seed)
            except AllZero:
                logger.warning("tensor '%s' is all zero; no spectrum written", tensor.name)
                return None
            write_spectrum(out_dir / spectrum_filename(tensor.name), curve)
            k = select_rank(curve.cumulative_variance, tau)
            rows, cols = tensor.shape
            return SpectrumSummary(
                tensor.name, rows, cols, k, float(curve.cumulative_variance[k - 1])
            )

        analysed = map_ordered(
            analyse, selected, threads=self.threads, desc="spectra", progress=self.progress
        )
        summaries = [s for s in analysed if s is not None]
        write_csv(
            out_dir / "spectrum_summary.csv",
            ["name", "rows", "cols", "rank_at_tau", "retained"],
            ([s.name, s.rows, s.cols, s.rank_at_tau, repr(s.retained)] for s in summaries),
        )
        return summaries

    def save_lore(self, lore: LoreAdapter, path: PathLike):
        """
        Store a LoRE-Adapter: "<name>.lore_b"/"<name>.lore_a" per factor, dense
        tensors verbatim, tau and per-tensor retained variance in the metadata.
        """
        tensors = list(lore.dense.values())
        for factor in lore.factors.values():
            tensors.append(
                NamedTensor(f"{factor.name}{FACTOR_B_SUFFIX}", DType.FLOAT32, factor.factor_b)
            )
            tensors.append(
                NamedTensor(f"{factor.name}{FACTOR_A_SUFFIX}", DType.FLOAT32, factor.factor_a)
            )
        metadata = adapter_metadata(
            AdapterKind.LORE_ADAPTER, lore.base_digest, lore.instruct_digest, lore.metadata
        )
        metadata["tau"] = repr(lore.tau)
        metadata["retained_variance"] = json.dumps(
            {name: f.retained_variance for name, f in lore.factors.items()}, sort_keys=True
        )
        self.store.write_container(path, tensors, metadata)
        logger.info(
            "saved lore-adapter (%d factors, %d dense) to %s",
            len(lore.factors),
            len(lore.dense),
            path,
        )

    def load_lore(self, path: PathLike) -> LoreAdapter:
        """
        Read a LoRE-Adapter written by save_lore.

        Raises:
            FormatError: if the container is not a LoRE-Adapter or a factor pair is incomplete
        """
        tensors, metadata = self.store.read_container(path)
        if metadata.get("kind") != AdapterKind.LORE_ADAPTER.value:
            raise FormatError(
                f"{path}: expected a lore-adapter, found kind '{metadata.get('kind')}'"
            )
        try:
            retained: Dict[str, float] = json.loads(metadata.get("retained_variance", "{}"))
            tau = float(metadata["tau"])
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: invalid lore-adapter metadata: {e}") from e

        by_name = {t.name: t for t in tensors}
        factors = []
        for name, variance in sorted(retained.items()):
            b = by_name.pop(name + FACTOR_B_SUFFIX, None)
            a = by_name.pop(name + FACTOR_A_SUFFIX, None)
            if a is None or b is None:
                raise FormatError(f"{path}: incomplete factor pair for '{name}'")
            try:
                factors.append(LowRankFactor(name, b.to_float32(), a.to_float32(), variance))
            except ValueError as e:
                raise FormatError(f"{path}: {e}") from e
        reserved = RESERVED_KEYS + ("tau", "retained_variance")
        extra = {k: v for k, v in metadata.items() if k not in reserved}
        return LoreAdapter(
            factors,
            by_name.values(),
            tau,
            base_digest=metadata.get("base_digest", ""),
            instruct_digest=metadata.get("instruct_digest", ""),
            metadata=extra,
        )
