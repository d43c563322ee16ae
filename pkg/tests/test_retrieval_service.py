"""Tests for BM25 retrieval and prompt assembly."""

import math
import os
import tempfile

import pytest

from src.models.errors import EmptyCorpus, KeyMismatch, MissingContext, MissingGold, UsageError
from src.models.qa import Passage, QAExample
from src.services import retrieval_service
from src.services.retrieval_service import PromptService, RetrievalService
from src.services.records_io import write_jsonl


@pytest.fixture
def temp_dir():
    """Create a temporary directory for corpus and index files."""
    with tempfile.TemporaryDirectory() as path:
        yield path


@pytest.fixture
def retrieval():
    """Retrieval service with the default BM25 parameters."""
    return RetrievalService()


@pytest.fixture
def corpus():
    """Three passages of lengths 3, 4 and 2."""
    return [
        Passage("d1", "The cat sat."),
        Passage("d2", "the dog sat down"),
        Passage("d3", "A bird"),
    ]


class TestBm25:
    """Test index construction and scoring."""

    def test_statistics(self, retrieval, corpus):
        """Test document lengths, average length and document frequency."""
        index = retrieval.build_index(corpus)
        assert index.doc_count == 3
        assert index.avgdl == 3.0
        assert index.df("sat") == 2
        assert index.df("missing") == 0

    def test_single_term_score(self, retrieval, corpus):
        """Test a hand-computed score for a term in one passage of average length."""
        index = retrieval.build_index(corpus)
        hits = retrieval.query(index, "cat", top_k=3)
        assert [h.passage_id for h in hits] == ["d1"]
        assert hits[0].score == pytest.approx(math.log(8.0 / 3.0))

    def test_two_term_scores(self, retrieval, corpus):
        """Test length normalization over two shared terms."""
        index = retrieval.build_index(corpus)
        hits = retrieval.query(index, "The sat?", top_k=5)
        weight = math.log(1.6)
        assert [h.passage_id for h in hits] == ["d1", "d2"]
        assert hits[0].score == pytest.approx(2 * weight)
        assert hits[1].score == pytest.approx(2 * weight * 2.5 / 2.875)

    def test_repeated_query_terms_count_once(self, retrieval, corpus):
        """Test that duplicate query terms do not double the score."""
        index = retrieval.build_index(corpus)
        once = retrieval.query(index, "cat")[0].score
        twice = retrieval.query(index, "cat cat")[0].score
        assert once == twice

    def test_idf_never_negative(self, retrieval):
        """Test that a term in every passage still has positive weight."""
        index = retrieval.build_index([Passage("a", "x"), Passage("b", "x")])
        assert retrieval_service.idf(index, "x") > 0

    def test_ties_by_id(self, retrieval):
        """Test that equal scores are ordered by passage id."""
        index = retrieval.build_index([Passage("b", "same text"), Passage("a", "same text")])
        hits = retrieval.query(index, "same", top_k=2)
        assert [h.passage_id for h in hits] == ["a", "b"]

    def test_order_independent(self, retrieval, corpus):
        """Test that corpus order does not change the index."""
        forward = retrieval.build_index(corpus)
        backward = retrieval.build_index(list(reversed(corpus)))
        assert forward.to_dict() == backward.to_dict()

    def test_no_shared_terms(self, retrieval, corpus):
        """Test that an unrelated query retrieves nothing."""
        index = retrieval.build_index(corpus)
        assert retrieval.query(index, "zebra") == []

    def test_top_k_validation(self, retrieval, corpus):
        """Test that top_k must be positive."""
        index = retrieval.build_index(corpus)
        with pytest.raises(UsageError):
            retrieval.query(index, "cat", top_k=0)

    def test_parameter_ranges(self):
        """Test that k1 must be non-negative and b must lie in [0, 1]."""
        with pytest.raises(UsageError, match="b must be"):
            RetrievalService(b=1.5)
        with pytest.raises(UsageError, match="k1 must be"):
            RetrievalService(k1=-1.0)
        edge = RetrievalService(k1=0.0, b=1.0)
        assert (edge.k1, edge.b) == (0.0, 1.0)

    def test_index_records_parameters(self, corpus):
        """Test that an index carries the parameters it was built with."""
        index = RetrievalService(k1=2.0, b=0.25).build_index(corpus)
        assert (index.k1, index.b) == (2.0, 0.25)

    def test_empty_corpus(self, retrieval):
        """Test that an empty corpus cannot be indexed."""
        with pytest.raises(EmptyCorpus):
            retrieval.build_index([])

    def test_save_load(self, retrieval, temp_dir, corpus):
        """Test that a saved index scores identically."""
        tuned = RetrievalService(k1=1.2, b=0.5)
        index = tuned.build_index(corpus)
        path = os.path.join(temp_dir, "index.json")
        retrieval.save_index(index, path)
        loaded = retrieval.load_index(path)
        assert loaded.k1 == 1.2
        assert retrieval.query(loaded, "dog sat") == retrieval.query(index, "dog sat")


class TestOracleAndAccuracy:
    """Test oracle retrieval and accuracy."""

    def test_oracle(self, corpus):
        """Test returning the gold passage."""
        by_id = {p.id: p for p in corpus}
        example = QAExample("q1", "Who sat?", ["cat"], gold_passage_id="d1")
        assert retrieval_service.oracle_retrieve(example, by_id).id == "d1"

    def test_oracle_missing_gold(self, corpus):
        """Test examples without a usable gold passage."""
        by_id = {p.id: p for p in corpus}
        with pytest.raises(MissingGold):
            retrieval_service.oracle_retrieve(QAExample("q1", "?", ["a"]), by_id)
        with pytest.raises(MissingGold):
            unknown = QAExample("q1", "?", ["a"], gold_passage_id="d9")
            retrieval_service.oracle_retrieve(unknown, by_id)

    def test_accuracy(self):
        """Test top-1 and top-k accuracy."""
        results = {"q1": ["d1", "d2"], "q2": ["d3", "d1"]}
        gold = {"q1": "d1", "q2": "d1"}
        assert retrieval_service.retrieval_accuracy(results, gold) == 0.5
        assert retrieval_service.retrieval_accuracy(results, gold, at_k=2) == 1.0

    def test_accuracy_key_mismatch(self):
        """Test that result and gold ids must agree."""
        with pytest.raises(KeyMismatch):
            retrieval_service.retrieval_accuracy({"q1": ["d1"]}, {"q2": "d1"})

    def test_load_questions(self, temp_dir):
        """Test reading questions without answers."""
        path = os.path.join(temp_dir, "questions.jsonl")
        write_jsonl(
            path,
            [
                {"id": 1, "question": "Who sat?", "passage_id": "d1"},
                {"id": 2, "question": "Why?"},
                {"id": 3, "question": "How?", "passage_id": 7},
            ],
        )
        questions = retrieval_service.load_questions(path)
        assert [q.id for q in questions] == ["1", "2", "3"]
        assert questions[0].gold_passage_id == "d1"
        assert questions[1].gold_passage_id is None
        assert questions[2].gold_passage_id == "7"


class TestPrompts:
    """Test prompt templates."""

    def test_llama_closed_book(self):
        """Test the system + user layout."""
        messages = PromptService().render("llama_cb", "What is the capital of France")
        assert [m.role for m in messages] == ["system", "user"]
        assert messages[0].content == "Answer the following question."
        assert messages[1].content == "What is the capital of France?"

    def test_single_question_mark(self):
        """Test that the question ends with exactly one question mark."""
        messages = PromptService().render("gm_cb", "Who wrote it??")
        assert messages == [retrieval_service.Message("user", "Who wrote it?")]

    def test_llama_with_context(self):
        """Test context in the system message."""
        messages = PromptService().render("llama_rag", "Who sat?", context="The cat sat.")
        expected = "Answer the following question given this context: The cat sat.."
        assert messages[0].content == expected
        assert messages[1].content == "Who sat?"

    def test_gm_with_context(self):
        """Test context and question in one user message."""
        messages = PromptService().render("gm_rag", "Who sat", context="The cat sat.")
        assert len(messages) == 1
        assert messages[0].content == (
            "Answer the following question given this context: The cat sat.\nQuestion: Who sat?"
        )

    def test_missing_context(self):
        """Test that augmented templates need a passage."""
        with pytest.raises(MissingContext):
            PromptService().render("gm_rag", "Who sat?")

    def test_unknown_template(self):
        """Test that template ids are validated."""
        with pytest.raises(ValueError):
            PromptService().render("chatml", "Who?")
