"""Reading and writing safetensors containers, single-file or sharded.

A sharded checkpoint is a JSON manifest {"metadata": {"total_size"},
"weight_map"} next to its shard files.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

from safetensors import SafetensorError, deserialize, safe_open, serialize_file

from src.models.checkpoint import AlignmentReport, Checkpoint, ShardIndex
from src.models.errors import FormatError, ShardMissing, ShardTooSmall
from src.models.tensor import DType, NamedTensor
from src.services.worker_pool import map_ordered

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

INDEX_SUFFIX = ".index.json"


def is_shard_index(path: PathLike) -> bool:
    """True when path names a shard-index manifest."""
    return str(path).endswith(".json")


def plan_shards(tensors: List[NamedTensor], max_shard_bytes: int) -> List[List[NamedTensor]]:
    """
    Greedy first-fit packing in name order: each tensor goes into the first
    shard with room for it, or opens a new shard.

    Raises:
        ShardTooSmall: if a tensor is larger than max_shard_bytes
    """
    shards: List[List[NamedTensor]] = []
    sizes: List[int] = []
    for tensor in sorted(tensors, key=lambda t: t.name):
        if tensor.nbytes > max_shard_bytes:
            raise ShardTooSmall(
                f"tensor '{tensor.name}' is {tensor.nbytes} bytes, "
                f"larger than max_shard_bytes={max_shard_bytes}"
            )
        for i, size in enumerate(sizes):
            if size + tensor.nbytes <= max_shard_bytes:
                shards[i].append(tensor)
                sizes[i] += tensor.nbytes
                break
        else:
            shards.append([tensor])
            sizes.append(tensor.nbytes)
    return shards


def shard_filename(manifest: Path, index: int, count: int) -> str:
    """Shard name derived from the manifest name, e.g. model-00001-of-00002.safetensors."""
    stem = manifest.name
    if stem.endswith(INDEX_SUFFIX):
        stem = stem[: -len(INDEX_SUFFIX)]
    elif stem.endswith(".json"):
        stem = stem[: -len(".json")]
    if stem.endswith(".safetensors"):
        stem = stem[: -len(".safetensors")]
    return f"{stem}-{index:05d}-of-{count:05d}.safetensors"


def validate_pair(base: Checkpoint, instruct: Checkpoint) -> AlignmentReport:
    """
    Compare the name and shape sets of a base and an instruct checkpoint.

    Problems are reported, never raised; the pair is diffable when the
    report has no missing names and no shape mismatches.
    """
    base_names = set(base.tensors)
    instruct_names = set(instruct.tensors)
    matched = []
    mismatches = []
    for name in sorted(base_names & instruct_names):
        shape_a = base[name].shape
        shape_b = instruct[name].shape
        if shape_a == shape_b:
            matched.append(name)
        else:
            mismatches.append((name, shape_a, shape_b))
    return AlignmentReport(
        matched=matched,
        missing_in_a=sorted(instruct_names - base_names),
        missing_in_b=sorted(base_names - instruct_names),
        shape_mismatches=mismatches,
    )


class CheckpointStore:
    """Loads and saves checkpoints and adapter containers on disk."""

    def __init__(self, threads: Optional[int] = None):
        """
        Initialize the store.

        Args:
            threads: Worker cap for reading shards in parallel
        """
        self.threads = threads

    def read_container(self, path: PathLike) -> Tuple[List[NamedTensor], Dict[str, str]]:
        """
        Read every tensor and the metadata of one container file.

        Args:
            path: Container file

        Returns:
            (tensors, metadata)

        Raises:
            FormatError: malformed header, out-of-bounds offsets or unsupported dtype
            OSError: if the file cannot be read
        """
        path = Path(path)
        raw = path.read_bytes()
        try:
            entries = deserialize(raw)
        except SafetensorError as e:
            raise FormatError(f"{path}: {e}") from e

        tensors = []
        for name, entry in entries:
            try:
                dtype = DType.from_container_code(entry["dtype"])
            except ValueError:
                raise FormatError(f"{path}: tensor '{name}' has unsupported dtype '{entry['dtype']}'")
            try:
                tensors.append(NamedTensor.from_bytes(name, dtype, entry["shape"], entry["data"]))
            except ValueError as e:
                raise FormatError(f"{path}: {e}") from e
        return tensors, self.read_metadata(path)

    def read_metadata(self, path: PathLike) -> Dict[str, str]:
        """Read only the metadata map of a container (no tensor data)."""
        if not Path(path).is_file():
            raise FileNotFoundError(f"{path}: no such container file")
        try:
            with safe_open(str(path), framework="numpy") as f:
                return dict(f.metadata() or {})
        except SafetensorError as e:
            raise FormatError(f"{path}: {e}") from e

    def write_container(
        self,
        path: PathLike,
        tensors: List[NamedTensor],
        metadata: Optional[Mapping[str, str]] = None,
    ):
        """
        Write tensors and metadata as one container file.

        The file is written to a temporary sibling and renamed into place.
        """
        path = Path(path)
        payload = {
            t.name: {"dtype": t.dtype.value, "shape": list(t.shape), "data": t.to_bytes()}
            for t in sorted(tensors, key=lambda t: t.name)
        }
        header = {str(k): str(v) for k, v in metadata.items()} if metadata else None

        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        os.close(fd)
        try:
            serialize_file(payload, tmp_name, metadata=header)
            os.replace(tmp_name, path)
        except BaseException:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise

    def read_shard_index(self, path: PathLike) -> ShardIndex:
        """Parse a shard-index manifest."""
        path = Path(path)
        try:
            return ShardIndex.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, AttributeError, ValueError) as e:
            raise FormatError(f"{path}: invalid shard index: {e}") from e

    def _resolve_directory(self, path: Path) -> Path:
        manifests = sorted(path.glob(f"*{INDEX_SUFFIX}"))
        if len(manifests) == 1:
            return manifests[0]
        containers = sorted(path.glob("*.safetensors"))
        if len(containers) == 1:
            return containers[0]
        raise FormatError(
            f"{path}: expected exactly one '*{INDEX_SUFFIX}' manifest or one '*.safetensors' file"
        )

    def load(self, path: PathLike) -> Checkpoint:
        """
        Load a checkpoint from a container file, a shard-index manifest, or a
        directory holding exactly one of either.

        Args:
            path: File, manifest or directory

        Returns:
            Fully materialized Checkpoint with tensors in lexicographic order

        Raises:
            FormatError: malformed container or manifest
            ShardMissing: a manifest names a shard that does not exist
            OSError: unreadable input
        """
        path = Path(path)
        if path.is_dir():
            path = self._resolve_directory(path)
        if not is_shard_index(path):
            tensors, metadata = self.read_container(path)
            logger.debug("loaded %d tensors from %s", len(tensors), path)
            return self._build_checkpoint(path, tensors, metadata)

        index = self.read_shard_index(path)
        shard_paths = [path.parent / name for name in index.shard_files]
        for shard_path in shard_paths:
            if not shard_path.is_file():
                raise ShardMissing(f"{path}: shard '{shard_path.name}' does not exist")

        shards = map_ordered(self.read_container, shard_paths, threads=self.threads)
        tensors: List[NamedTensor] = []
        metadata: Dict[str, str] = {}
        for shard_path, (shard_tensors, shard_metadata) in zip(shard_paths, shards):
            expected = {n for n, f in index.weight_map.items() if f == shard_path.name}
            found = {t.name for t in shard_tensors}
            if expected != found:
                raise FormatError(
                    f"{path}: shard '{shard_path.name}' holds {sorted(found ^ expected)} "
                    "inconsistently with the weight map"
                )
            tensors.extend(shard_tensors)
            metadata.update(shard_metadata)
        logger.debug("loaded %d tensors from %d shards of %s", len(tensors), len(shard_paths), path)
        return self._build_checkpoint(path, tensors, metadata)

    def _build_checkpoint(
        self, path: Path, tensors: List[NamedTensor], metadata: Dict[str, str]
    ) -> Checkpoint:
        try:
            return Checkpoint(tensors, metadata)
        except ValueError as e:
            raise FormatError(f"{path}: {e}") from e

    def save(
        self, ckpt: Checkpoint, path: PathLike, max_shard_bytes: Optional[int] = None
    ) -> Optional[ShardIndex]:
        """
        Save a checkpoint as one container file, or sharded behind a manifest.

        Args:
            ckpt: Checkpoint to write
            path: Container path, or manifest path (".json") when sharding
            max_shard_bytes: Shard size cap; None writes a single file

        Returns:
            The ShardIndex when sharded, otherwise None

        Raises:
            ShardTooSmall: if a tensor does not fit in one shard
            OSError: on write failure
        """
        path = Path(path)
        tensors = list(ckpt.tensors.values())
        if max_shard_bytes is None:
            self.write_container(path, tensors, ckpt.metadata)
            logger.debug("wrote %d tensors to %s", len(tensors), path)
            return None

        if not is_shard_index(path):
            path = path.with_name(path.name + INDEX_SUFFIX)
        shards = plan_shards(tensors, max_shard_bytes)
        weight_map: Dict[str, str] = {}
        for i, shard in enumerate(shards, start=1):
            filename = shard_filename(path, i, len(shards))
            self.write_container(path.parent / filename, shard, ckpt.metadata)
            weight_map.update({t.name: filename for t in shard})
        index = ShardIndex(weight_map, ckpt.total_bytes)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(index.to_dict(), indent=2) + "\n", encoding="utf-8")
        logger.debug("wrote %d tensors in %d shards behind %s", len(tensors), len(shards), path)
        return index
