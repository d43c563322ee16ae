"""Exception hierarchy shared by all services and the command line."""

from typing import List, Optional, Sequence


class ReAdaptError(Exception):
    """Base class for every error the toolkit raises on purpose."""

    exit_code = 1


class UsageError(ReAdaptError):
    """Invalid argument combination or value."""

    exit_code = 64


class ScaleOutOfRange(UsageError):
    """A partial-adaptation scale outside [0, 1] without the override flag."""


class FormatError(ReAdaptError):
    """Malformed container, manifest, config or JSONL input."""

    exit_code = 65


class ShardMissing(FormatError):
    """A shard named by an index manifest does not exist."""


class ShardTooSmall(UsageError):
    """max_shard_bytes cannot hold the largest tensor."""


class UnknownId(FormatError):
    """A prediction or retrieval id has no matching reference."""


class KeyMismatch(FormatError):
    """Result and gold key sets differ."""


class MissingGold(FormatError):
    """An example has no usable gold passage."""


class MissingContext(FormatError):
    """A retrieval-augmented prompt template was rendered without context."""


class EmptyCorpus(FormatError):
    """A BM25 index was requested over zero passages."""


class UnresolvedTarget(FormatError):
    """Adapter target patterns that match no base tensor."""

    def __init__(self, patterns: Sequence[str], modules: Sequence[str] = ()):
        self.patterns: List[str] = list(patterns)
        self.modules: List[str] = list(modules)
        message = f"unresolved adapter targets: {', '.join(self.patterns)}"
        if self.modules:
            message += f" (modules without a base tensor: {', '.join(self.modules)})"
        super().__init__(message)


class ShapeMismatch(ReAdaptError):
    """Two tensors that must agree in shape do not."""

    def __init__(self, message: str, name: Optional[str] = None):
        self.name = name
        super().__init__(message)


class DigestMismatch(ReAdaptError):
    """The base checkpoint is not the one an adapter was extracted from."""


class NotDiffable(ReAdaptError):
    """Base and instruct checkpoints are not architecture-aligned."""

    exit_code = 2

    def __init__(self, report):
        self.report = report
        super().__init__(
            f"checkpoints are not diffable: {len(report.missing_in_a)} missing in base, "
            f"{len(report.missing_in_b)} missing in instruct, "
            f"{len(report.shape_mismatches)} shape mismatches"
        )


class NumericError(ReAdaptError):
    """Numerical failure; maps to exit code 3."""

    exit_code = 3


class ConvergenceFailure(NumericError):
    """The SVD solver did not converge for a tensor."""

    def __init__(self, name: str, detail: str = ""):
        self.name = name
        message = f"SVD did not converge for tensor '{name}'"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class AllZero(NumericError):
    """Explained variance requested for an all-zero spectrum."""


class DegenerateColumn(NumericError):
    """A DoRA direction column has (near) zero norm."""
