"""Densify externally trained LoRA/DoRA knowledge adapters into dense deltas."""

import json
import logging
from collections import namedtuple
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Set, Union

import numpy as np

from src.models.adapter import (
    AdapterKind,
    DeltaAdapter,
    DoraModule,
    LoraModule,
    PeftConfig,
)
from src.models.checkpoint import Checkpoint
from src.models.errors import (
    DegenerateColumn,
    FormatError,
    ShapeMismatch,
    UnresolvedTarget,
    UsageError,
)
from src.models.tensor import NamedTensor
from src.services.checkpoint_io import CheckpointStore
from src.services.worker_pool import map_ordered

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CONFIG_FILENAME = "adapter_config.json"
WEIGHTS_FILENAME = "adapter_model.safetensors"
ALL_LINEAR = "all-linear"

LORA_A = ".lora_A.weight"
LORA_B = ".lora_B.weight"
MAGNITUDE_SUFFIXES = (".lora_magnitude_vector", ".lora_magnitude_vector.weight")

# prefixes a PEFT wrapper adds in front of the wrapped model's own tensor names
WRAPPER_PREFIXES = ("base_model.model.", "base_model.")

MIN_COLUMN_NORM = 1e-12

PeftBundle = namedtuple("PeftBundle", ["config", "modules", "unresolved"])


def densify_lora(mod: LoraModule) -> NamedTensor:
    """
    ΔW = (alpha / r)·B·A as a float32 tensor named after the target.

    Raises:
        ShapeMismatch: if B and A do not chain
    """
    if mod.b.shape[1] != mod.a.shape[0]:
        raise ShapeMismatch(
            f"module '{mod.target_name}': B is {list(mod.b.shape)}, A is {list(mod.a.shape)}",
            name=mod.target_name,
        )
    scale = mod.alpha / mod.rank
    update = scale * (mod.b.astype(np.float64) @ mod.a.astype(np.float64))
    return NamedTensor.from_values(mod.target_name, update)


def magnitude_axis(shape: tuple, magnitude_length: int) -> int:
    """
    Axis reduced when taking DoRA vector norms of a (rows, cols) weight.

    One magnitude per output feature (length == rows, the PEFT layout of an
    (out, in) weight) reduces axis 1; length == cols only reduces axis 0.
    Square weights follow the output-feature convention.

    Raises:
        ShapeMismatch: if the magnitude length matches neither dimension
    """
    rows, cols = shape
    if magnitude_length == rows:
        return 1
    if magnitude_length == cols:
        return 0
    raise ShapeMismatch(
        f"magnitude vector of length {magnitude_length} fits neither dimension of {list(shape)}"
    )


def densify_dora(mod: DoraModule, base_tensor: NamedTensor) -> NamedTensor:
    """
    DoRA delta W' − W with V' = W + (alpha/r)·B·A and W' = m ⊙ V'/‖V'‖.

    Args:
        mod: DoRA module
        base_tensor: The pretrained weight W the module adapts

    Returns:
        float32 delta named after the target

    Raises:
        ShapeMismatch: if shapes are inconsistent
        DegenerateColumn: if a direction vector has norm below 1e-12
    """
    if base_tensor.ndim != 2:
        raise ShapeMismatch(
            f"DoRA target '{base_tensor.name}' is not a matrix", name=base_tensor.name
        )
    update = densify_lora(mod.lora)
    if update.shape != base_tensor.shape:
        raise ShapeMismatch(
            f"module '{mod.target_name}': update {list(update.shape)} vs base {list(base_tensor.shape)}",
            name=mod.target_name,
        )
    axis = magnitude_axis(base_tensor.shape, mod.magnitude.size)

    weight = base_tensor.to_float32().astype(np.float64)
    direction = weight + update.to_float32().astype(np.float64)
    norms = np.linalg.norm(direction, axis=axis, keepdims=True)
    if (norms < MIN_COLUMN_NORM).any():
        raise DegenerateColumn(
            f"module '{mod.target_name}': {int((norms < MIN_COLUMN_NORM).sum())} "
            "direction vectors have zero norm"
        )
    magnitude = mod.magnitude.astype(np.float64)
    magnitude = magnitude.reshape(norms.shape)
    merged = direction * (magnitude / norms)
    return NamedTensor.from_values(mod.target_name, merged - weight)


def _strip_wrapper(prefix: str) -> str:
    for wrapper in WRAPPER_PREFIXES:
        if prefix.startswith(wrapper):
            return prefix[len(wrapper):]
    return prefix


def _resolve_target(prefix: str, base_names: Optional[Set[str]]) -> Optional[str]:
    """Base tensor adapted by the module stored under prefix, or None if absent."""
    candidates = [f"{prefix}.weight", f"{_strip_wrapper(prefix)}.weight"]
    if base_names is None:
        return candidates[-1]
    for candidate in candidates:
        if candidate in base_names:
            return candidate
    return None


def _matches(prefix: str, pattern: str) -> bool:
    return pattern == ALL_LINEAR or prefix == pattern or prefix.endswith("." + pattern)


def _weights_file(directory: Path) -> Path:
    preferred = directory / WEIGHTS_FILENAME
    if preferred.is_file():
        return preferred
    containers = sorted(directory.glob("*.safetensors"))
    if len(containers) != 1:
        raise FormatError(f"{directory}: expected one adapter weights container")
    return containers[0]


class PeftService:
    """Service for reading and densifying PEFT adapter directories."""

    def __init__(self, store: CheckpointStore, threads: Optional[int] = None):
        """
        Initialize the PEFT service.

        Args:
            store: Container reader for the adapter weights
            threads: Worker cap for densification
        """
        self.store = store
        self.threads = threads

    def load_config(self, directory: PathLike) -> PeftConfig:
        """Read adapter_config.json."""
        path = Path(directory) / CONFIG_FILENAME
        if not path.is_file():
            raise FormatError(f"{directory}: missing {CONFIG_FILENAME}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            return PeftConfig.from_dict(data)
        except (json.JSONDecodeError, AttributeError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: invalid adapter config: {e}") from e

    def load_dir(
        self, directory: PathLike, base_names: Optional[Iterable[str]] = None
    ) -> PeftBundle:
        """
        Read an adapter directory (config + weights container) into modules.

        Args:
            directory: Adapter directory
            base_names: Tensor names of the base checkpoint; when given, every
                module and every target pattern must resolve against them

        Returns:
            PeftBundle(config, modules, unresolved) with unresolved empty on success

        Raises:
            FormatError: missing/invalid config or weights, incomplete A/B pairs
            UnresolvedTarget: listing the configured patterns left without a
                base tensor, and the stored modules that could not be placed
        """
        directory = Path(directory)
        if not directory.is_dir():
            raise FormatError(f"{directory}: not an adapter directory")
        config = self.load_config(directory)
        tensors, _ = self.store.read_container(_weights_file(directory))
        by_name: Dict[str, NamedTensor] = {t.name: t for t in tensors}
        names = set(base_names) if base_names is not None else None

        prefixes = sorted(n[: -len(LORA_A)] for n in by_name if n.endswith(LORA_A))
        if not prefixes:
            raise FormatError(f"{directory}: adapter weights contain no '*{LORA_A}' tensors")

        modules: List[Union[LoraModule, DoraModule]] = []
        failed_patterns: Set[str] = set()
        failed_modules: List[str] = []
        for prefix in prefixes:
            b = by_name.get(prefix + LORA_B)
            if b is None:
                raise FormatError(f"{directory}: '{prefix}' has lora_A but no lora_B")
            a = by_name[prefix + LORA_A]
            if a.ndim != 2 or b.ndim != 2:
                raise FormatError(f"{directory}: '{prefix}' factors must be matrices")
            if a.shape[0] != config.r:
                raise FormatError(
                    f"{directory}: '{prefix}' has rank {a.shape[0]}, config says r={config.r}"
                )
            matching = [p for p in config.target_modules if _matches(prefix, p)]
            target = _resolve_target(prefix, names)
            if target is None:
                failed_modules.append(prefix)
                failed_patterns.update(matching)
                continue
            if not matching:
                logger.debug("module '%s' matches no target pattern; densified anyway", prefix)
            lora = LoraModule(
                target, a.to_float32(), b.to_float32(), config.lora_alpha, config.lora_dropout
            )
            magnitude = next(
                (by_name[prefix + s] for s in MAGNITUDE_SUFFIXES if prefix + s in by_name), None
            )
            if config.use_dora:
                if magnitude is None:
                    raise FormatError(
                        f"{directory}: DoRA module '{prefix}' has no magnitude vector"
                    )
                modules.append(DoraModule(lora, magnitude.to_float32()))
            else:
                modules.append(lora)

        for pattern in config.target_modules:
            if not any(_matches(prefix, pattern) for prefix in prefixes):
                failed_patterns.add(pattern)
        unresolved = [p for p in config.target_modules if p in failed_patterns]
        if unresolved or failed_modules:
            raise UnresolvedTarget(unresolved, failed_modules)
        logger.info("loaded %d adapter modules from %s", len(modules), directory)
        return PeftBundle(config, modules, unresolved)

    def densify(self, bundle: PeftBundle, base: Optional[Checkpoint] = None) -> DeltaAdapter:
        """
        Densify every module into a knowledge adapter Ψ.

        Args:
            bundle: Loaded adapter directory
            base: Pretrained checkpoint; required for DoRA, used for shape checks otherwise

        Raises:
            UsageError: if a DoRA module is present without a base
            ShapeMismatch: if an update does not fit its target
        """
        if base is None and any(isinstance(m, DoraModule) for m in bundle.modules):
            raise UsageError("DoRA adapters need the base checkpoint to densify")

        def densify_one(module: Union[LoraModule, DoraModule]) -> NamedTensor:
            if isinstance(module, DoraModule):
                return densify_dora(module, base[module.target_name])
            update = densify_lora(module)
            if base is not None and update.shape != base[module.target_name].shape:
                raise ShapeMismatch(
                    f"module '{module.target_name}': update {list(update.shape)} vs "
                    f"base {list(base[module.target_name].shape)}",
                    name=module.target_name,
                )
            return update

        deltas = map_ordered(densify_one, bundle.modules, threads=self.threads)
        metadata = {
            "adapter_config": json.dumps(bundle.config.to_dict(), sort_keys=True),
        }
        return DeltaAdapter(
            deltas,
            base_digest=base.source_digest if base is not None else "",
            metadata=metadata,
            kind=AdapterKind.KNOWLEDGE_ADAPTER,
        )
