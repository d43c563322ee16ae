"""Adapter data models: dense deltas, low-rank factors and PEFT modules."""

from enum import Enum
from typing import Any, Dict, Iterable, List, Mapping, Optional

import numpy as np

from src.models.tensor import NamedTensor


class AdapterKind(str, Enum):
    """Value of the "kind" metadata key of a stored adapter."""
    RE_ADAPTER = "re-adapter"
    KNOWLEDGE_ADAPTER = "knowledge-adapter"
    LORE_ADAPTER = "lore-adapter"


def _by_name(tensors: Iterable[NamedTensor]) -> Dict[str, NamedTensor]:
    collected: Dict[str, NamedTensor] = {}
    for tensor in tensors:
        if tensor.name in collected:
            raise ValueError(f"duplicate tensor name '{tensor.name}'")
        collected[tensor.name] = tensor
    return {name: collected[name] for name in sorted(collected)}


class DeltaAdapter:
    """Dense per-tensor difference with provenance digests."""

    def __init__(
        self,
        deltas: Iterable[NamedTensor],
        base_digest: str = "",
        instruct_digest: str = "",
        metadata: Optional[Mapping[str, str]] = None,
        kind: AdapterKind = AdapterKind.RE_ADAPTER,
    ):
        """
        Initialize a DeltaAdapter.

        Args:
            deltas: Per-tensor differences (float32 unless down-cast on request)
            base_digest: Digest of the checkpoint subtracted from
            instruct_digest: Digest of the checkpoint that was differenced
            metadata: Extra string metadata (source model identifiers etc.)
            kind: re-adapter for extracted deltas, knowledge-adapter for densified PEFT
        """
        self.deltas: Dict[str, NamedTensor] = _by_name(deltas)
        self.base_digest = base_digest
        self.instruct_digest = instruct_digest
        self.metadata: Dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}
        self.kind = AdapterKind(kind)

    @property
    def names(self) -> List[str]:
        return list(self.deltas)

    def __len__(self) -> int:
        return len(self.deltas)

    def __getitem__(self, name: str) -> NamedTensor:
        return self.deltas[name]

    def __repr__(self) -> str:
        return f"DeltaAdapter(kind={self.kind.value}, tensors={len(self)})"


class LowRankFactor:
    """Truncated-SVD factor pair B (m×k) and A (k×n) of one delta matrix."""

    def __init__(
        self,
        name: str,
        factor_b: np.ndarray,
        factor_a: np.ndarray,
        retained_variance: float,
    ):
        """
        Initialize a LowRankFactor.

        Args:
            name: Name of the delta tensor this pair reconstructs
            factor_b: m×k matrix, U_k·sqrt(S_k)
            factor_a: k×n matrix, sqrt(S_k)·Vt_k
            retained_variance: Cumulative explained variance at rank k
        """
        self.name = name
        self.factor_b = np.ascontiguousarray(factor_b, dtype=np.float32)
        self.factor_a = np.ascontiguousarray(factor_a, dtype=np.float32)
        self.retained_variance = float(retained_variance)
        self._validate()

    def _validate(self):
        if self.factor_b.ndim != 2 or self.factor_a.ndim != 2:
            raise ValueError(f"factor '{self.name}': factors must be matrices")
        if self.factor_b.shape[1] != self.factor_a.shape[0]:
            raise ValueError(
                f"factor '{self.name}': inner dims differ "
                f"({self.factor_b.shape[1]} vs {self.factor_a.shape[0]})"
            )
        if self.rank < 1:
            raise ValueError(f"factor '{self.name}': rank must be positive")
        if not 0.0 <= self.retained_variance <= 1.0 + 1e-9:
            raise ValueError(f"factor '{self.name}': retained variance outside [0, 1]")

    @property
    def rank(self) -> int:
        return int(self.factor_a.shape[0])

    @property
    def shape(self) -> tuple:
        """Shape of the reconstructed matrix."""
        return (int(self.factor_b.shape[0]), int(self.factor_a.shape[1]))

    @property
    def param_count(self) -> int:
        """k(m+n)."""
        rows, cols = self.shape
        return self.rank * (rows + cols)

    def __repr__(self) -> str:
        return f"LowRankFactor(name='{self.name}', shape={list(self.shape)}, rank={self.rank})"


class LoreAdapter:
    """Low-rank RE-Adapter: factored 2-D tensors plus tensors kept dense."""

    def __init__(
        self,
        factors: Iterable[LowRankFactor],
        dense: Iterable[NamedTensor],
        tau: float,
        base_digest: str = "",
        instruct_digest: str = "",
        metadata: Optional[Mapping[str, str]] = None,
    ):
        """
        Initialize a LoreAdapter.

        Args:
            factors: Factor pairs for compressed tensors
            dense: Tensors stored verbatim (1-D, small, or not worth factoring)
            tau: Explained-variance threshold used at compression
            base_digest: Provenance digest copied from the source delta
            instruct_digest: Provenance digest copied from the source delta
            metadata: Extra string metadata copied from the source delta
        """
        self.factors: Dict[str, LowRankFactor] = {}
        for factor in factors:
            if factor.name in self.factors:
                raise ValueError(f"duplicate factor name '{factor.name}'")
            self.factors[factor.name] = factor
        self.factors = {name: self.factors[name] for name in sorted(self.factors)}
        self.dense: Dict[str, NamedTensor] = _by_name(dense)
        overlap = set(self.factors) & set(self.dense)
        if overlap:
            raise ValueError(f"names both factored and dense: {sorted(overlap)}")
        self.tau = float(tau)
        self.base_digest = base_digest
        self.instruct_digest = instruct_digest
        self.metadata: Dict[str, str] = {str(k): str(v) for k, v in (metadata or {}).items()}

    @property
    def names(self) -> List[str]:
        return sorted(set(self.factors) | set(self.dense))

    @property
    def param_count(self) -> int:
        """Σ k(m+n) over factors plus dense element counts."""
        return sum(f.param_count for f in self.factors.values()) + sum(
            t.numel for t in self.dense.values()
        )

    def __repr__(self) -> str:
        return (
            f"LoreAdapter(tau={self.tau}, factors={len(self.factors)}, "
            f"dense={len(self.dense)})"
        )


class PeftConfig:
    """Adapter configuration as written next to the adapter weights."""

    def __init__(
        self,
        r: int = 64,
        lora_alpha: float = 128.0,
        lora_dropout: float = 0.05,
        use_dora: bool = True,
        target_modules: Optional[List[str]] = None,
    ):
        """
        Initialize a PeftConfig. Defaults reproduce the knowledge-adapter
        training setup: rank 64, alpha 128, dropout 0.05, DoRA, all-linear.

        Args:
            r: Adapter rank
            lora_alpha: Scaling numerator
            lora_dropout: Dropout used in training (metadata only)
            use_dora: True when a magnitude vector accompanies each module
            target_modules: Name-suffix patterns of adapted tensors
        """
        self.r = int(r)
        self.lora_alpha = float(lora_alpha)
        self.lora_dropout = float(lora_dropout)
        self.use_dora = bool(use_dora)
        self.target_modules = list(target_modules) if target_modules else ["all-linear"]
        self._validate()

    def _validate(self):
        if self.r < 1:
            raise ValueError("Adapter rank must be at least 1")
        if self.lora_alpha <= 0:
            raise ValueError("Adapter alpha must be positive")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.r

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PeftConfig":
        """Create a config from adapter_config.json contents."""
        targets = data.get("target_modules")
        if isinstance(targets, str):
            targets = [targets]
        return cls(
            r=data.get("r", 64),
            lora_alpha=data.get("lora_alpha", 128.0),
            lora_dropout=data.get("lora_dropout", 0.05) or 0.0,
            use_dora=data.get("use_dora", False),
            target_modules=targets,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "r": self.r,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.lora_dropout,
            "use_dora": self.use_dora,
            "target_modules": self.target_modules,
        }


class LoraModule:
    """One low-rank update ΔW = (alpha / r)·B·A targeting a base tensor."""

    def __init__(
        self,
        target_name: str,
        a: np.ndarray,
        b: np.ndarray,
        alpha: float,
        dropout: float = 0.0,
    ):
        """
        Initialize a LoraModule.

        Args:
            target_name: Full name of the base tensor being adapted
            a: r×n down-projection
            b: m×r up-projection
            alpha: Scaling numerator
            dropout: Training dropout, kept as metadata
        """
        self.target_name = target_name
        self.a = np.asarray(a, dtype=np.float32)
        self.b = np.asarray(b, dtype=np.float32)
        self.alpha = float(alpha)
        self.dropout = float(dropout)
        self._validate()

    def _validate(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ValueError(f"module '{self.target_name}': A and B must be matrices")
        if self.rank < 1:
            raise ValueError(f"module '{self.target_name}': rank must be at least 1")
        if self.alpha <= 0:
            raise ValueError(f"module '{self.target_name}': alpha must be positive")

    @property
    def rank(self) -> int:
        return int(self.a.shape[0])

    @property
    def shape(self) -> tuple:
        """Shape of B·A."""
        return (int(self.b.shape[0]), int(self.a.shape[1]))

    def __repr__(self) -> str:
        return f"LoraModule(target='{self.target_name}', rank={self.rank}, alpha={self.alpha})"


class DoraModule:
    """A LoRA update on the direction plus a learned magnitude per vector."""

    def __init__(self, lora: LoraModule, magnitude: np.ndarray):
        """
        Initialize a DoraModule.

        Args:
            lora: Low-rank direction update
            magnitude: Non-negative magnitude per weight vector
        """
        self.lora = lora
        self.magnitude = np.asarray(magnitude, dtype=np.float32).reshape(-1)
        if (self.magnitude < 0).any():
            raise ValueError(f"module '{lora.target_name}': magnitudes must be non-negative")

    @property
    def target_name(self) -> str:
        return self.lora.target_name

    @property
    def rank(self) -> int:
        return self.lora.rank

    def __repr__(self) -> str:
        return f"DoraModule(target='{self.target_name}', rank={self.rank})"
