"""Question answering and retrieval data models."""

from collections import namedtuple
from typing import Any, Dict, List, Mapping, Optional


ExampleScore = namedtuple("ExampleScore", ["id", "rouge", "em"])

ScoredPassage = namedtuple("ScoredPassage", ["passage_id", "score"])


class Passage:
    """A retrievable evidence passage."""

    def __init__(self, id: str, text: str):
        self.id = str(id)
        self.text = text or ""
        if not self.id:
            raise ValueError("Passage id must be non-empty")

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "text": self.text}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Passage":
        return cls(id=data["id"], text=data["text"])

    def __repr__(self) -> str:
        return f"Passage(id='{self.id}')"


class QAExample:
    """A question with one or more reference answers."""

    def __init__(
        self,
        id: str,
        question: str,
        answers: List[str],
        gold_passage_id: Optional[str] = None,
    ):
        """
        Initialize a QAExample.

        Args:
            id: Example id, unique per dataset
            question: Question text
            answers: Reference answers (at least one)
            gold_passage_id: Passage known to answer the question, if any
        """
        self.id = str(id)
        self.question = question or ""
        self.answers = [str(a) for a in answers]
        self.gold_passage_id = str(gold_passage_id) if gold_passage_id is not None else None
        self._validate()

    def _validate(self):
        if not self.id:
            raise ValueError("Example id must be non-empty")
        if not self.answers:
            raise ValueError(f"example '{self.id}' has no reference answers")

    def to_dict(self) -> Dict[str, Any]:
        data = {"id": self.id, "question": self.question, "answers": self.answers}
        if self.gold_passage_id is not None:
            data["passage_id"] = self.gold_passage_id
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "QAExample":
        answers = data.get("answers", [])
        if isinstance(answers, str):
            answers = [answers]
        return cls(
            id=data["id"],
            question=data.get("question", ""),
            answers=answers,
            gold_passage_id=data.get("passage_id"),
        )

    def __repr__(self) -> str:
        return f"QAExample(id='{self.id}', answers={len(self.answers)})"


class EvalReport:
    """Per-example and mean Rouge-L recall / exact-match scores."""

    def __init__(self, per_example: List[ExampleScore], missing: int = 0):
        """
        Initialize an EvalReport.

        Args:
            per_example: (id, rouge, em) rows, one per reference example
            missing: How many of those rows had no prediction
        """
        self.per_example = list(per_example)
        self.missing = missing

    @property
    def n(self) -> int:
        return len(self.per_example)

    @property
    def rouge_l_recall_mean(self) -> float:
        if not self.per_example:
            return 0.0
        return sum(row.rouge for row in self.per_example) / self.n

    @property
    def exact_match_mean(self) -> float:
        if not self.per_example:
            return 0.0
        return sum(row.em for row in self.per_example) / self.n

    def to_dict(self, precision: int = 0) -> Dict[str, Any]:
        """Summary with means ×100 rounded to `precision` decimals."""
        return {
            "n": self.n,
            "missing": self.missing,
            "rouge_l_recall": round(100 * self.rouge_l_recall_mean, precision),
            "exact_match": round(100 * self.exact_match_mean, precision),
        }

    def __repr__(self) -> str:
        return (
            f"EvalReport(n={self.n}, rouge_l_recall={self.rouge_l_recall_mean:.4f}, "
            f"exact_match={self.exact_match_mean:.4f})"
        )


class Bm25Index:
    """Inverted index with the corpus statistics BM25 scoring needs."""

    def __init__(
        self,
        doc_lengths: Mapping[str, int],
        postings: Mapping[str, Mapping[str, int]],
        k1: float = 1.5,
        b: float = 0.75,
    ):
        """
        Initialize a Bm25Index.

        Args:
            doc_lengths: Passage id → token count
            postings: Term → (passage id → term frequency)
            k1: Term-frequency saturation
            b: Length normalization strength
        """
        self.doc_lengths: Dict[str, int] = {d: int(doc_lengths[d]) for d in sorted(doc_lengths)}
        self.postings: Dict[str, Dict[str, int]] = {
            term: {d: int(postings[term][d]) for d in sorted(postings[term])}
            for term in sorted(postings)
        }
        self.k1 = float(k1)
        self.b = float(b)
        self._validate()

    def _validate(self):
        if not self.doc_lengths:
            raise ValueError("BM25 index needs at least one passage")
        if self.k1 < 0 or not 0.0 <= self.b <= 1.0:
            raise ValueError("BM25 needs k1 >= 0 and 0 <= b <= 1")
        for term, docs in self.postings.items():
            unknown = set(docs) - set(self.doc_lengths)
            if unknown:
                raise ValueError(f"term '{term}' posts to unknown passages {sorted(unknown)}")

    @property
    def doc_count(self) -> int:
        return len(self.doc_lengths)

    @property
    def avgdl(self) -> float:
        return sum(self.doc_lengths.values()) / self.doc_count

    def df(self, term: str) -> int:
        """Number of passages containing term."""
        return len(self.postings.get(term, {}))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k1": self.k1,
            "b": self.b,
            "doc_lengths": self.doc_lengths,
            "postings": self.postings,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Bm25Index":
        return cls(
            doc_lengths=data["doc_lengths"],
            postings=data["postings"],
            k1=data.get("k1", 1.5),
            b=data.get("b", 0.75),
        )

    def __repr__(self) -> str:
        return f"Bm25Index(N={self.doc_count}, terms={len(self.postings)}, k1={self.k1}, b={self.b})"
