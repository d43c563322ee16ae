"""BM25 passage retrieval, oracle retrieval, accuracy and QA prompt assembly."""

import json
import logging
import math
from collections import Counter, namedtuple
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

from src.models.errors import (
    EmptyCorpus,
    FormatError,
    KeyMismatch,
    MissingContext,
    MissingGold,
    UsageError,
)
from src.models.qa import Bm25Index, Passage, QAExample, ScoredPassage
from src.services.eval_service import normalize_text
from src.services.records_io import iter_jsonl, write_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_K1 = 1.5
DEFAULT_B = 0.75

TEMPLATES_PATH = Path(__file__).resolve().parent.parent / "assets" / "prompt_templates.json"

Message = namedtuple("Message", ["role", "content"])

Question = namedtuple("Question", ["id", "question", "gold_passage_id"])


class TemplateId(str, Enum):
    """Prompt layouts: Llama-3 style (system + user) and Gemma/Mistral style (user only)."""
    LLAMA_CB = "llama_cb"
    LLAMA_RAG = "llama_rag"
    GM_CB = "gm_cb"
    GM_RAG = "gm_rag"

    @property
    def needs_context(self) -> bool:
        return self.value.endswith("_rag")


def idf(index: Bm25Index, term: str) -> float:
    """ln(1 + (N − df + 0.5)/(df + 0.5)); never negative."""
    df = index.df(term)
    return math.log(1.0 + (index.doc_count - df + 0.5) / (df + 0.5))


def oracle_retrieve(example: Union[QAExample, Question], corpus: Mapping[str, Passage]) -> Passage:
    """
    Return the gold passage of an example.

    Raises:
        MissingGold: if the example has no gold id or it is not in the corpus
    """
    if not example.gold_passage_id:
        raise MissingGold(f"example '{example.id}' has no gold passage id")
    passage = corpus.get(example.gold_passage_id)
    if passage is None:
        raise MissingGold(
            f"gold passage '{example.gold_passage_id}' of example '{example.id}' is not in the corpus"
        )
    return passage


def retrieval_accuracy(
    results: Mapping[str, Sequence[str]], gold: Mapping[str, str], at_k: int = 1
) -> float:
    """
    Fraction of examples whose gold id is among their top at_k retrieved ids.

    Raises:
        KeyMismatch: if results and gold cover different example ids
    """
    if set(results) != set(gold):
        difference = sorted(set(results) ^ set(gold))
        raise KeyMismatch(f"result and gold ids differ: {', '.join(difference[:10])}")
    if not gold:
        return 0.0
    hits = sum(1 for key, gold_id in gold.items() if gold_id in list(results[key])[:at_k])
    return hits / len(gold)


def load_questions(path: PathLike) -> List[Question]:
    """
    Read question JSONL {"id", "question", "passage_id"?}; answers are not needed.

    Raises:
        FormatError: missing id or question, or duplicate ids
    """
    questions: List[Question] = []
    seen = set()
    for line_no, record in enumerate(iter_jsonl(path), start=1):
        if "id" not in record or not isinstance(record.get("question"), str):
            raise FormatError(f"{path}: record {line_no} needs 'id' and a string 'question'")
        question_id = str(record["id"])
        if question_id in seen:
            raise FormatError(f"{path}: duplicate question id '{question_id}'")
        seen.add(question_id)
        gold = record.get("passage_id")
        questions.append(
            Question(question_id, record["question"], str(gold) if gold is not None else None)
        )
    return questions


class RetrievalService:
    """Service for building, storing and querying BM25 indexes."""

    def __init__(self, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        """
        Initialize the retrieval service.

        Args:
            k1: Term-frequency saturation for new indexes (k1 ≥ 0)
            b: Length normalization for new indexes (0 ≤ b ≤ 1)

        Raises:
            UsageError: if k1 or b is out of range
        """
        if k1 < 0:
            raise UsageError(f"k1 must be >= 0, got {k1}")
        if not 0.0 <= b <= 1.0:
            raise UsageError(f"b must be in [0, 1], got {b}")
        self.k1 = k1
        self.b = b

    def load_corpus(self, path: PathLike) -> List[Passage]:
        """
        Read corpus JSONL {"id", "text"}.

        Raises:
            FormatError: bad lines or duplicate ids
        """
        passages = []
        seen = set()
        for line_no, record in enumerate(iter_jsonl(path), start=1):
            try:
                passage = Passage.from_dict(record)
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}: record {line_no}: {e}") from e
            if passage.id in seen:
                raise FormatError(f"{path}: duplicate passage id '{passage.id}'")
            seen.add(passage.id)
            passages.append(passage)
        return passages

    def build_index(self, corpus: Sequence[Passage]) -> Bm25Index:
        """
        Tokenize every passage and tally lengths and per-term postings.

        The result does not depend on corpus order.

        Raises:
            EmptyCorpus: if corpus is empty
            FormatError: on duplicate passage ids
        """
        if not corpus:
            raise EmptyCorpus("cannot index an empty corpus")
        doc_lengths: Dict[str, int] = {}
        postings: Dict[str, Dict[str, int]] = {}
        for passage in corpus:
            if passage.id in doc_lengths:
                raise FormatError(f"duplicate passage id '{passage.id}'")
            tokens = normalize_text(passage.text)
            doc_lengths[passage.id] = len(tokens)
            for term, tf in Counter(tokens).items():
                postings.setdefault(term, {})[passage.id] = tf
        index = Bm25Index(doc_lengths, postings, k1=self.k1, b=self.b)
        logger.info(
            "indexed %d passages, %d terms, avgdl %.2f",
            index.doc_count,
            len(index.postings),
            index.avgdl,
        )
        return index

    def query(self, index: Bm25Index, q: str, top_k: int = 1) -> List[ScoredPassage]:
        """
        Rank passages for a query by BM25 over its distinct normalized terms.

        The index's own k1 and b are used. Only passages sharing at least one
        term with the query are returned, ordered by descending score with
        ties broken by ascending passage id.

        Raises:
            UsageError: if top_k < 1
        """
        if top_k < 1:
            raise UsageError(f"top_k must be at least 1, got {top_k}")
        terms = sorted(set(normalize_text(q)) & set(index.postings))
        if not terms:
            return []
        avgdl = index.avgdl
        scores: Dict[str, float] = {}
        for term in terms:
            weight = idf(index, term)
            for doc_id, tf in index.postings[term].items():
                length_norm = (
                    1.0 - index.b + index.b * index.doc_lengths[doc_id] / avgdl if avgdl else 1.0
                )
                scores[doc_id] = scores.get(doc_id, 0.0) + weight * (tf * (index.k1 + 1.0)) / (
                    tf + index.k1 * length_norm
                )
        ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
        return [ScoredPassage(doc_id, score) for doc_id, score in ranked[:top_k]]

    def save_index(self, index: Bm25Index, path: PathLike):
        """Write an index as JSON (statistics, postings, k1 and b)."""
        write_json(path, index.to_dict())

    def load_index(self, path: PathLike) -> Bm25Index:
        """
        Read an index written by save_index.

        Raises:
            FormatError: if the file is not a valid index
        """
        path = Path(path)
        try:
            return Bm25Index.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, AttributeError) as e:
            raise FormatError(f"{path}: invalid BM25 index: {e}") from e


def load_templates(path: PathLike = TEMPLATES_PATH) -> Dict[str, List[Dict[str, str]]]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def _question_text(question: str) -> str:
    return question.strip().rstrip("?").rstrip()


class PromptService:
    """Fills closed-book and retrieval-augmented QA prompt templates."""

    def __init__(self, templates: Optional[Mapping[str, List[Dict[str, str]]]] = None):
        self.templates = templates if templates is not None else load_templates()

    def render(
        self,
        template_id: Union[str, TemplateId],
        question: str,
        context: Optional[str] = None,
    ) -> List[Message]:
        """
        Fill a QA prompt template.

        The question is rendered with exactly one trailing "?".

        Args:
            template_id: llama_cb, llama_rag, gm_cb or gm_rag
            question: Question text
            context: Passage text; required by the *_rag templates

        Returns:
            (role, content) messages in template order

        Raises:
            MissingContext: if a *_rag template gets no context
        """
        template_id = TemplateId(template_id)
        if template_id.needs_context and not context:
            raise MissingContext(f"template '{template_id.value}' needs a context passage")
        layout = self.templates[template_id.value]
        values = {"question": _question_text(question), "context": (context or "").strip()}
        return [Message(turn["role"], turn["content"].format(**values)) for turn in layout]
