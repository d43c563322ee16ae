"""End-to-end tests of the command line."""

import json
import os
import tempfile

import numpy as np
import pytest

from src.main import main
from src.models.checkpoint import Checkpoint
from src.models.tensor import DType, NamedTensor
from src.services.checkpoint_io import CheckpointStore
from src.services.records_io import read_csv, read_jsonl, write_jsonl


@pytest.fixture
def temp_dir():
    """Create a temporary working directory."""
    with tempfile.TemporaryDirectory() as path:
        yield path


@pytest.fixture
def store():
    return CheckpointStore(threads=1)


@pytest.fixture
def checkpoints(temp_dir, store):
    """Write an aligned base/instruct pair; the delta of 'w' is rank 1."""
    u = np.array([1.0, 2.0, 0.0, -1.0])
    v = np.array([0.5, 0.0, 1.0, 1.0])
    base = Checkpoint(
        [
            NamedTensor.from_values("w", np.eye(4), DType.BFLOAT16),
            NamedTensor.from_values("norm", [1.0, 1.0, 1.0, 1.0]),
        ]
    )
    instruct = Checkpoint(
        [
            NamedTensor.from_values("w", np.eye(4) + np.outer(u, v), DType.BFLOAT16),
            NamedTensor.from_values("norm", [1.0, 1.5, 1.0, 1.0]),
        ]
    )
    base_path = os.path.join(temp_dir, "base.safetensors")
    instruct_path = os.path.join(temp_dir, "instruct.safetensors")
    store.save(base, base_path)
    store.save(instruct, instruct_path)
    return base_path, instruct_path


def path(temp_dir, name):
    return os.path.join(temp_dir, name)


class TestUsage:
    """Test argument handling and exit codes."""

    def test_unknown_command(self):
        """Test that an unknown subcommand is a usage error."""
        assert main(["explode"]) == 64

    def test_missing_command(self):
        """Test that a subcommand is required."""
        assert main([]) == 64

    def test_invalid_tau(self, temp_dir):
        """Test that tau outside (0, 1] is a usage error."""
        assert main(["compress", path(temp_dir, "d"), path(temp_dir, "o"), "--tau", "0"]) == 64

    def test_merge_scale_out_of_range(self, temp_dir, checkpoints):
        """Test that merge scales are range-checked."""
        base_path, instruct_path = checkpoints
        re_path = path(temp_dir, "re.safetensors")
        assert main(["--quiet", "diff", base_path, instruct_path, re_path]) == 0
        out = path(temp_dir, "out.safetensors")
        code = main(["merge", out, "--base", base_path, "--re-adapter", re_path, "--beta", "1.5"])
        assert code == 64

    def test_bm25_parameter_ranges(self, temp_dir):
        """Test that out-of-range BM25 parameters are usage errors before any input is read."""
        corpus = path(temp_dir, "corpus.jsonl")
        write_jsonl(corpus, [{"id": "p1", "text": "some text"}])
        index = path(temp_dir, "index.json")
        assert main(["index", corpus, index, "--b", "1.5"]) == 64
        assert main(["index", corpus, index, "--k1", "-1"]) == 64
        assert not os.path.exists(index)
        assert main(["index", corpus, index, "--k1", "0", "--b", "1"]) == 0

    def test_missing_input_file(self, temp_dir):
        """Test that an unreadable input maps to exit code 1."""
        assert main(["inspect", path(temp_dir, "nope.safetensors")]) == 1

    def test_malformed_container(self, temp_dir):
        """Test that a malformed container is a format error."""
        bad = path(temp_dir, "bad.safetensors")
        with open(bad, "wb") as f:
            f.write(b"\x00")
        assert main(["inspect", bad]) == 65


class TestCheckpointCommands:
    """Test diff, compress, spectrum, merge and sweep."""

    def test_not_diffable(self, store, temp_dir, checkpoints):
        """Test exit code 2 and the alignment report for a misaligned pair."""
        base_path, _ = checkpoints
        other = path(temp_dir, "other.safetensors")
        store.save(Checkpoint([NamedTensor.from_values("w", np.zeros((4, 3)))]), other)
        report = path(temp_dir, "report.json")
        assert main(["diff", base_path, other, path(temp_dir, "re.safetensors"), "--report", report]) == 2
        with open(report) as f:
            data = json.load(f)
        assert not data["diffable"]
        assert data["missing_in_b"] == ["norm"]

    def test_diff_prints_alignment(self, temp_dir, checkpoints, capsys):
        """Test that a successful diff still prints the alignment summary."""
        base_path, instruct_path = checkpoints
        assert main(["diff", base_path, instruct_path, path(temp_dir, "re.safetensors")]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert "matched: 2" in lines
        assert "shape mismatches: 0" in lines

    def test_diff_merge_round_trip(self, store, temp_dir, checkpoints):
        """Test that base + 1.0 * RE-Adapter reproduces the instruct checkpoint."""
        base_path, instruct_path = checkpoints
        re_path = path(temp_dir, "re.safetensors")
        stats = path(temp_dir, "stats.csv")
        assert main(["--quiet", "diff", base_path, instruct_path, re_path, "--stats", stats]) == 0
        assert store.read_metadata(re_path)["kind"] == "re-adapter"
        assert [row["name"] for row in read_csv(stats)] == ["norm", "w"]

        out = path(temp_dir, "merged.safetensors")
        assert main(["merge", out, "--base", base_path, "--re-adapter", re_path, "--beta", "1.0"]) == 0
        merged = store.load(out)
        instruct = store.load(instruct_path)
        assert merged.source_digest == instruct.source_digest

    def test_compress_and_merge_lore(self, store, temp_dir, checkpoints):
        """Test compressing the RE-Adapter and merging the LoRE form."""
        base_path, instruct_path = checkpoints
        re_path = path(temp_dir, "re.safetensors")
        lore_path = path(temp_dir, "lore.safetensors")
        sweep = path(temp_dir, "sweep.csv")
        assert main(["diff", base_path, instruct_path, re_path]) == 0
        assert main(["compress", re_path, lore_path, "--tau", "0.9", "--base", base_path, "--sweep", sweep]) == 0
        assert store.read_metadata(lore_path)["kind"] == "lore-adapter"

        with open(path(temp_dir, "lore.params.json")) as f:
            report = json.load(f)
        assert report["factored"] == 1
        assert report["lore_params"] == 12
        assert report["percent"] == 60.0
        assert len(read_csv(sweep)) == 20

        out = path(temp_dir, "merged.safetensors")
        assert main(["merge", out, "--base", base_path, "--re-adapter", lore_path, "--beta", "1.0"]) == 0
        merged = store.load(out)
        instruct = store.load(instruct_path)
        np.testing.assert_allclose(merged["w"].to_float32(), instruct["w"].to_float32(), atol=1e-2)

    def test_sharded_merge(self, store, temp_dir, checkpoints):
        """Test writing the merged checkpoint in shards."""
        base_path, instruct_path = checkpoints
        re_path = path(temp_dir, "re.safetensors")
        assert main(["diff", base_path, instruct_path, re_path]) == 0
        out = path(temp_dir, "merged.safetensors.index.json")
        assert main(["merge", out, "--base", base_path, "--re-adapter", re_path, "--max-shard-bytes", "32"]) == 0
        assert len(store.load(out)) == 2

    def test_spectrum(self, temp_dir, checkpoints):
        """Test writing spectrum CSVs for the RE-Adapter."""
        base_path, instruct_path = checkpoints
        re_path = path(temp_dir, "re.safetensors")
        out_dir = path(temp_dir, "spectra")
        assert main(["diff", base_path, instruct_path, re_path]) == 0
        assert main(["spectrum", re_path, out_dir]) == 0
        assert os.path.exists(os.path.join(out_dir, "w.csv"))
        summary = read_csv(os.path.join(out_dir, "spectrum_summary.csv"))
        assert summary[0]["rank_at_tau"] == "1"

    def test_sweep(self, temp_dir, checkpoints):
        """Test a beta sweep without a knowledge adapter."""
        base_path, instruct_path = checkpoints
        re_path = path(temp_dir, "re.safetensors")
        out_dir = path(temp_dir, "sweep")
        assert main(["diff", base_path, instruct_path, re_path]) == 0
        assert main(["sweep", out_dir, "--base", base_path, "--re-adapter", re_path, "--betas", "0", "1"]) == 0
        manifest = read_csv(os.path.join(out_dir, "sweep_manifest.csv"))
        assert [row["path"] for row in manifest] == [
            "alpha_0_beta_0.safetensors",
            "alpha_0_beta_1.safetensors",
        ]

    def test_config_file(self, store, temp_dir, checkpoints):
        """Test that a config file supplies flag defaults."""
        base_path, instruct_path = checkpoints
        re_path = path(temp_dir, "re.safetensors")
        lore_path = path(temp_dir, "lore.safetensors")
        config = path(temp_dir, "config.json")
        with open(config, "w") as f:
            json.dump({"tau": 0.9, "seed": 3, "quiet": True}, f)
        assert main(["diff", base_path, instruct_path, re_path]) == 0
        assert main(["--config", config, "compress", re_path, lore_path]) == 0
        assert store.read_metadata(lore_path)["tau"] == "0.9"

    def test_config_unknown_key(self, temp_dir):
        """Test that config keys must name flags of the command."""
        config = path(temp_dir, "config.json")
        with open(config, "w") as f:
            json.dump({"colour": "blue"}, f)
        assert main(["--config", config, "index", path(temp_dir, "c.jsonl"), path(temp_dir, "i.json")]) == 64


class TestQACommands:
    """Test index, retrieve, prompt and score."""

    def write_inputs(self, temp_dir):
        write_jsonl(
            path(temp_dir, "corpus.jsonl"),
            [
                {"id": "p1", "text": "The Eiffel Tower is in Paris."},
                {"id": "p2", "text": "Mount Fuji is in Japan."},
            ],
        )
        write_jsonl(
            path(temp_dir, "questions.jsonl"),
            [
                {"id": "q1", "question": "Where is the Eiffel Tower?", "answers": ["Paris"], "passage_id": "p1"},
                {"id": "q2", "question": "Where is Mount Fuji", "answers": ["Japan"], "passage_id": "p2"},
            ],
        )

    def test_retrieve_and_prompt(self, temp_dir):
        """Test BM25 retrieval, the accuracy summary and augmented prompts."""
        self.write_inputs(temp_dir)
        index = path(temp_dir, "index.json")
        retrieved = path(temp_dir, "retrieved.jsonl")
        prompts = path(temp_dir, "prompts.jsonl")
        assert main(["index", path(temp_dir, "corpus.jsonl"), index]) == 0
        assert main(["retrieve", index, path(temp_dir, "questions.jsonl"), retrieved, "-k", "2"]) == 0
        rows = read_jsonl(retrieved)
        assert [row["retrieved"][0] for row in rows] == ["p1", "p2"]
        with open(path(temp_dir, "retrieved.summary.json")) as f:
            assert json.load(f)["accuracy_at_1"] == 1.0

        assert main(
            [
                "prompt", "gm_rag", path(temp_dir, "questions.jsonl"), prompts,
                "--retrieved", retrieved, "--corpus", path(temp_dir, "corpus.jsonl"),
            ]
        ) == 0
        first = read_jsonl(prompts)[0]
        assert first["id"] == "q1"
        assert first["messages"] == [
            {
                "role": "user",
                "content": "Answer the following question given this context: "
                "The Eiffel Tower is in Paris.\nQuestion: Where is the Eiffel Tower?",
            }
        ]

    def test_oracle_retrieval(self, temp_dir):
        """Test that oracle retrieval is always correct."""
        self.write_inputs(temp_dir)
        retrieved = path(temp_dir, "oracle.jsonl")
        args = ["retrieve", "unused", path(temp_dir, "questions.jsonl"), retrieved, "--oracle"]
        assert main(args + ["--corpus", path(temp_dir, "corpus.jsonl")]) == 0
        rows = read_jsonl(retrieved)
        assert [row["retrieved"] for row in rows] == [["p1"], ["p2"]]
        assert [row["scores"] for row in rows] == [[1.0], [1.0]]
        assert main(args) == 64

    def test_rag_prompt_without_context(self, temp_dir):
        """Test that an augmented template without retrieval fails as a format error."""
        self.write_inputs(temp_dir)
        assert main(["prompt", "llama_rag", path(temp_dir, "questions.jsonl"), path(temp_dir, "p.jsonl")]) == 65

    def test_score(self, temp_dir):
        """Test scoring predictions."""
        self.write_inputs(temp_dir)
        predictions = path(temp_dir, "preds.jsonl")
        write_jsonl(predictions, [{"id": "q1", "response": "It is in Paris."}, {"id": "q2", "response": "China"}])
        assert main(["score", predictions, path(temp_dir, "questions.jsonl"), "--precision", "1"]) == 0
        with open(path(temp_dir, "preds.scores.json")) as f:
            summary = json.load(f)
        assert summary["rouge_l_recall"] == 50.0
        assert summary["exact_match"] == 50.0
        assert main(["score", predictions, path(temp_dir, "corpus.jsonl")]) == 65
