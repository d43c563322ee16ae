"""argparse tree for the readapt command line."""

import argparse
from typing import Dict, Tuple

from src import __version__
from src.models.errors import UsageError
from src.models.tensor import DType
from src.services.merge_service import DEFAULT_SCALE
from src.services.retrieval_service import DEFAULT_B, DEFAULT_K1, TemplateId
from src.services.spectra_service import DENSE_SVD_LIMIT


class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError (exit 64) instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _tau(value: str) -> float:
    try:
        tau = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid tau '{value}'")
    if not 0.0 < tau <= 1.0:
        raise argparse.ArgumentTypeError(f"tau must be in (0, 1], got {value}")
    return tau


def _positive_int(value: str) -> int:
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer '{value}'")
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def _add_merge_options(parser: argparse.ArgumentParser):
    parser.add_argument("--dtype", choices=[d.value for d in DType], help="output dtype (default: base dtype per tensor)")
    parser.add_argument("--verify-digests", action="store_true", help="require adapters to come from this base")
    parser.add_argument("--allow-extrapolation", action="store_true", help="permit scales outside [0, 1]")
    parser.add_argument("--max-shard-bytes", type=_positive_int, help="shard outputs above this size")


def build_parser() -> Tuple[ArgumentParser, Dict[str, argparse.ArgumentParser]]:
    """
    Build the top-level parser.

    Returns:
        (parser, subcommand name → subparser) so config-file defaults can be applied
    """
    parser = ArgumentParser(
        prog="readapt",
        description="Instruction adapters by checkpoint differencing, low-rank compression and partial adaptation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON file of flag defaults")
    parser.add_argument("--seed", type=int, default=0, help="global seed for randomized SVD")
    parser.add_argument("--threads", type=_positive_int, help="worker cap (default: $READAPT_THREADS or core count)")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="no progress bars")

    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    commands.required = True
    sub: Dict[str, argparse.ArgumentParser] = {}

    p = commands.add_parser("diff", help="extract the RE-Adapter instruct − base")
    p.add_argument("base", help="pretrained checkpoint")
    p.add_argument("instruct", help="instruction-tuned checkpoint")
    p.add_argument("out", help="output adapter container")
    p.add_argument("--skip-unmatched", action="store_true", help="diff the aligned intersection and warn")
    p.add_argument("--dtype", choices=[DType.FLOAT32.value, DType.BFLOAT16.value], default=DType.FLOAT32.value)
    p.add_argument("--stats", help="write per-tensor norm CSV here")
    p.add_argument("--report", help="write the alignment report JSON here")
    sub["diff"] = p

    p = commands.add_parser("compress", help="truncate a dense adapter to a LoRE-Adapter")
    p.add_argument("delta", help="dense adapter container")
    p.add_argument("out", help="output LoRE-Adapter container")
    p.add_argument("--tau", type=_tau, default=0.5, help="explained variance to retain per tensor")
    p.add_argument("--min-dim", type=_positive_int, default=2)
    p.add_argument("--no-storage-guard", dest="storage_guard", action="store_false",
                   help="factor even when k(m+n) >= mn")
    p.add_argument("--dense-svd-limit", type=_positive_int, default=DENSE_SVD_LIMIT)
    p.add_argument("--base", help="checkpoint the parameter percentage refers to (default: the delta)")
    p.add_argument("--report", help="parameter report JSON (default: OUT.params.json)")
    p.add_argument("--sweep", help="also write a tau,percent CSV here")
    p.add_argument("--sweep-taus", type=_tau, nargs="+", help="tau grid for --sweep (default 0.05..1.0)")
    sub["compress"] = p

    p = commands.add_parser("spectrum", help="per-tensor explained-variance curves")
    p.add_argument("delta", help="dense adapter container")
    p.add_argument("out_dir", help="directory for the CSV curves")
    p.add_argument("--layers", nargs="+", help="only tensors whose name contains one of these")
    p.add_argument("--tau", type=_tau, default=0.5, help="threshold for the summary's rank column")
    p.add_argument("--dense-svd-limit", type=_positive_int, default=DENSE_SVD_LIMIT)
    sub["spectrum"] = p

    p = commands.add_parser("merge", help="compose base + alpha*knowledge + beta*re-adapter")
    p.add_argument("out", help="output checkpoint (manifest path when sharding)")
    p.add_argument("--recipe", help="JSON recipe; replaces --base/--knowledge/--re-adapter")
    p.add_argument("--base", help="base checkpoint")
    p.add_argument("--knowledge", help="knowledge adapter (dense or lore)")
    p.add_argument("--re-adapter", help="RE-Adapter (dense or lore)")
    p.add_argument("--alpha", type=float, default=DEFAULT_SCALE)
    p.add_argument("--beta", type=float, default=DEFAULT_SCALE)
    _add_merge_options(p)
    sub["merge"] = p

    p = commands.add_parser("sweep", help="write one merged checkpoint per (alpha, beta)")
    p.add_argument("out_dir", help="output directory")
    p.add_argument("--base", required=True)
    p.add_argument("--knowledge")
    p.add_argument("--re-adapter")
    p.add_argument("--alphas", type=float, nargs="+", default=[DEFAULT_SCALE])
    p.add_argument("--betas", type=float, nargs="+", default=[DEFAULT_SCALE])
    p.add_argument("--dtype", choices=[d.value for d in DType])
    p.add_argument("--verify-digests", action="store_true")
    p.add_argument("--allow-extrapolation", action="store_true")
    sub["sweep"] = p

    p = commands.add_parser("densify", help="turn a LoRA/DoRA adapter directory into a knowledge adapter")
    p.add_argument("adapter_dir")
    p.add_argument("out")
    p.add_argument("--base", help="pretrained checkpoint (required for DoRA)")
    sub["densify"] = p

    p = commands.add_parser("inspect", help="summarize a checkpoint or adapter")
    p.add_argument("path")
    sub["inspect"] = p

    p = commands.add_parser("score", help="Rouge-L recall and exact match of predictions")
    p.add_argument("predictions", help="JSONL {id, response}")
    p.add_argument("references", help="JSONL {id, question, answers, passage_id?}")
    p.add_argument("--out-json", help="summary JSON (default: PREDICTIONS.scores.json)")
    p.add_argument("--out-csv", help="per-example CSV (default: PREDICTIONS.scores.csv)")
    p.add_argument("--no-lowercase", dest="lowercase", action="store_false")
    p.add_argument("--keep-punctuation", dest="strip_punctuation", action="store_false")
    p.add_argument("--precision", type=int, default=0, help="decimals of the x100 means")
    sub["score"] = p

    p = commands.add_parser("index", help="build a BM25 index over a passage corpus")
    p.add_argument("corpus", help="JSONL {id, text}")
    p.add_argument("out", help="index JSON")
    p.add_argument("--k1", type=float, default=DEFAULT_K1)
    p.add_argument("--b", type=float, default=DEFAULT_B)
    sub["index"] = p

    p = commands.add_parser("retrieve", help="retrieve passages for questions")
    p.add_argument("index", help="index JSON from 'index' (ignored with --oracle)")
    p.add_argument("questions", help="JSONL {id, question, passage_id?}")
    p.add_argument("out", help="JSONL {id, retrieved, scores}")
    p.add_argument("-k", "--top-k", type=_positive_int, default=1)
    p.add_argument("--oracle", action="store_true", help="return each question's gold passage")
    p.add_argument("--corpus", help="corpus JSONL (required with --oracle)")
    p.add_argument("--summary", help="accuracy JSON (default: OUT.summary.json)")
    sub["retrieve"] = p

    p = commands.add_parser("prompt", help="render QA prompts as role/content messages")
    p.add_argument("template", choices=[t.value for t in TemplateId])
    p.add_argument("questions", help="JSONL {id, question}")
    p.add_argument("out", help="JSONL {id, messages}")
    p.add_argument("--retrieved", help="retrieval JSONL; top passage becomes the context")
    p.add_argument("--corpus", help="corpus JSONL resolving retrieved ids")
    sub["prompt"] = p

    return parser, sub
