"""QA scoring: Rouge-L recall and exact-match-anywhere over normalized tokens."""

import logging
import unicodedata
from pathlib import Path
from typing import Dict, List, Sequence, Union

from src.models.errors import FormatError, UnknownId
from src.models.qa import EvalReport, ExampleScore, QAExample
from src.services.records_io import iter_jsonl, write_csv, write_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
References = Union[str, Sequence[str]]


def normalize_text(s: str, lowercase: bool = True, strip_punctuation: bool = True) -> List[str]:
    """
    Tokenize for scoring: lowercase, drop punctuation (Unicode category P),
    collapse whitespace, split on whitespace.

    Punctuation is removed before splitting, so "a,b" becomes the single token "ab".
    """
    if lowercase:
        s = s.lower()
    if strip_punctuation:
        s = "".join(ch for ch in s if not unicodedata.category(ch).startswith("P"))
    return s.split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence (O(len(a)·len(b)) DP, one row kept)."""
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0] * (len(b) + 1)
        for j, other in enumerate(b, start=1):
            if token == other:
                current[j] = previous[j - 1] + 1
            else:
                current[j] = max(previous[j], current[j - 1])
        previous = current
    return previous[-1]


def contains_sequence(needle: Sequence[str], haystack: Sequence[str]) -> bool:
    """True when needle occurs contiguously in haystack (never for an empty needle)."""
    size = len(needle)
    if size == 0 or size > len(haystack):
        return False
    needle = list(needle)
    return any(list(haystack[i:i + size]) == needle for i in range(len(haystack) - size + 1))


def _as_list(reference: References) -> List[str]:
    return [reference] if isinstance(reference, str) else list(reference)


def rouge_l_recall(reference: References, response: str, **normalize_flags) -> float:
    """
    LCS(reference, response) / len(reference) over normalized tokens; the
    maximum over references when several are given, 0 for an empty reference.
    """
    response_tokens = normalize_text(response, **normalize_flags)
    best = 0.0
    for ref in _as_list(reference):
        ref_tokens = normalize_text(ref, **normalize_flags)
        if not ref_tokens:
            continue
        best = max(best, lcs_length(ref_tokens, response_tokens) / len(ref_tokens))
    return best


def exact_match_anywhere(reference: References, response: str, **normalize_flags) -> int:
    """1 iff some normalized reference occurs contiguously in the normalized response."""
    response_tokens = normalize_text(response, **normalize_flags)
    for ref in _as_list(reference):
        if contains_sequence(normalize_text(ref, **normalize_flags), response_tokens):
            return 1
    return 0


class EvalService:
    """Service for scoring model responses against reference answers."""

    def __init__(self, lowercase: bool = True, strip_punctuation: bool = True):
        """
        Initialize the eval service.

        Args:
            lowercase: Lowercase before tokenizing
            strip_punctuation: Drop Unicode punctuation before tokenizing
        """
        self.normalize_flags = {"lowercase": lowercase, "strip_punctuation": strip_punctuation}

    def load_references(self, path: PathLike) -> List[QAExample]:
        """
        Read reference JSONL into QAExamples.

        Raises:
            FormatError: bad JSON, missing fields or duplicate ids
        """
        examples: List[QAExample] = []
        seen = set()
        for line_no, record in enumerate(iter_jsonl(path), start=1):
            try:
                example = QAExample.from_dict(record)
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}: record {line_no}: {e}") from e
            if example.id in seen:
                raise FormatError(f"{path}: duplicate example id '{example.id}'")
            seen.add(example.id)
            examples.append(example)
        return examples

    def load_predictions(self, path: PathLike) -> Dict[str, str]:
        """Read prediction JSONL {"id", "response"} into an id → response map."""
        predictions: Dict[str, str] = {}
        for line_no, record in enumerate(iter_jsonl(path), start=1):
            if "id" not in record or not isinstance(record.get("response", ""), str):
                raise FormatError(f"{path}: record {line_no} needs 'id' and a string 'response'")
            prediction_id = str(record["id"])
            if prediction_id in predictions:
                raise FormatError(f"{path}: duplicate prediction id '{prediction_id}'")
            predictions[prediction_id] = record.get("response") or ""
        return predictions

    def score_examples(
        self, examples: Sequence[QAExample], predictions: Dict[str, str]
    ) -> EvalReport:
        """
        Score predictions against examples; examples without a prediction score 0.

        Raises:
            UnknownId: if a prediction id is not among the examples
        """
        known = {example.id for example in examples}
        unknown = sorted(set(predictions) - known)
        if unknown:
            raise UnknownId(f"predictions for unknown ids: {', '.join(unknown[:10])}")

        rows = []
        missing = 0
        for example in examples:
            if example.id not in predictions:
                missing += 1
                rows.append(ExampleScore(example.id, 0.0, 0))
                continue
            response = predictions[example.id]
            rows.append(
                ExampleScore(
                    example.id,
                    rouge_l_recall(example.answers, response, **self.normalize_flags),
                    exact_match_anywhere(example.answers, response, **self.normalize_flags),
                )
            )
        if missing:
            logger.warning("%d of %d examples have no prediction; scored 0", missing, len(examples))
        return EvalReport(rows, missing=missing)

    def score_file(self, predictions: PathLike, references: PathLike) -> EvalReport:
        """Score a prediction JSONL file against a reference JSONL file."""
        return self.score_examples(
            self.load_references(references), self.load_predictions(predictions)
        )

    def write_report(
        self, report: EvalReport, json_path: PathLike, csv_path: PathLike, precision: int = 0
    ):
        """Summary JSON (means ×100, rounded) and per-example CSV."""
        summary = report.to_dict(precision)
        summary["rouge_l_recall_mean"] = report.rouge_l_recall_mean
        summary["exact_match_mean"] = report.exact_match_mean
        write_json(json_path, summary)
        write_csv(
            csv_path,
            ["id", "rouge_l_recall", "exact_match"],
            ([row.id, repr(row.rouge), row.em] for row in report.per_example),
        )
