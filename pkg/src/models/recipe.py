"""Merge recipe model: a base plus scaled adapter terms."""

import json
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from src.models.errors import FormatError, ScaleOutOfRange
from src.models.tensor import DType


class TermKind(str, Enum):
    """Storage form of a recipe term's adapter."""
    DENSE_DELTA = "dense-delta"
    LORE = "lore"


class MergeTerm:
    """One (adapter, scale) pair of a composition."""

    def __init__(self, path: str, scale: float, kind: TermKind = TermKind.DENSE_DELTA):
        """
        Initialize a MergeTerm.

        Args:
            path: Adapter file
            scale: Partial-adaptation strength
            kind: dense-delta or lore
        """
        self.path = str(path)
        self.scale = float(scale)
        self.kind = TermKind(kind)

    def to_dict(self) -> Dict[str, Any]:
        return {"path": self.path, "scale": self.scale, "kind": self.kind.value}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MergeTerm":
        return cls(
            path=data["path"],
            scale=data["scale"],
            kind=data.get("kind", TermKind.DENSE_DELTA.value),
        )

    def __repr__(self) -> str:
        return f"MergeTerm(path='{self.path}', scale={self.scale}, kind={self.kind.value})"


class MergeRecipe:
    """Ω = Φ + Σ scale_i·Δ_i over an ordered list of terms."""

    def __init__(
        self,
        base: str,
        terms: Optional[List[MergeTerm]] = None,
        dtype: Optional[DType] = None,
        verify_digests: bool = False,
        allow_extrapolation: bool = False,
    ):
        """
        Initialize a MergeRecipe.

        Args:
            base: Base checkpoint path (Φ)
            terms: Scaled adapters to add
            dtype: Output dtype; None keeps each base tensor's dtype
            verify_digests: Require each adapter's base digest to match Φ
            allow_extrapolation: Permit scales outside [0, 1]
        """
        self.base = str(base)
        self.terms = list(terms or [])
        self.dtype = DType(dtype) if dtype else None
        self.verify_digests = verify_digests
        self.allow_extrapolation = allow_extrapolation
        self._validate()

    def _validate(self):
        if self.allow_extrapolation:
            return
        for term in self.terms:
            if not 0.0 <= term.scale <= 1.0:
                raise ScaleOutOfRange(
                    f"scale {term.scale} for '{term.path}' is outside [0, 1]; "
                    "pass --allow-extrapolation to use it"
                )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base": self.base,
            "terms": [term.to_dict() for term in self.terms],
            "dtype": self.dtype.value if self.dtype else None,
            "verify_digests": self.verify_digests,
        }

    @classmethod
    def from_dict(
        cls, data: Mapping[str, Any], allow_extrapolation: bool = False
    ) -> "MergeRecipe":
        """
        Create a recipe from its JSON layout.

        Raises:
            FormatError: on missing keys or bad values
        """
        try:
            return cls(
                base=data["base"],
                terms=[MergeTerm.from_dict(term) for term in data.get("terms", [])],
                dtype=data.get("dtype"),
                verify_digests=bool(data.get("verify_digests", False)),
                allow_extrapolation=allow_extrapolation,
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"invalid merge recipe: {e}") from e

    @classmethod
    def from_file(
        cls, path: Union[str, Path], allow_extrapolation: bool = False
    ) -> "MergeRecipe":
        """Load a recipe JSON file; relative paths resolve against its directory."""
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON: {e}") from e
        if not isinstance(data, dict):
            raise FormatError(f"{path}: recipe must be a JSON object")
        recipe = cls.from_dict(data, allow_extrapolation=allow_extrapolation)
        recipe.base = str(path.parent / recipe.base)
        for term in recipe.terms:
            term.path = str(path.parent / term.path)
        return recipe

    def __repr__(self) -> str:
        return f"MergeRecipe(base='{self.base}', terms={self.terms})"
