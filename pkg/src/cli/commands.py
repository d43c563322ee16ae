"""Subcommand handlers. Each returns a process exit code.

Human summaries go to stdout, machine-readable outputs go to files and
diagnostics go to the log.
"""

import logging
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, Iterable, List

from src.cli.config import RunConfig
from src.models.adapter import DeltaAdapter, LoreAdapter
from src.models.checkpoint import Checkpoint
from src.models.errors import NotDiffable, UsageError
from src.models.recipe import MergeRecipe, MergeTerm
from src.models.tensor import DType, NamedTensor
from src.services.checkpoint_io import CheckpointStore, is_shard_index, validate_pair
from src.services.delta_service import DeltaService
from src.services.eval_service import EvalService
from src.services.merge_service import MergeService
from src.services.peft_service import CONFIG_FILENAME, PeftService
from src.services.records_io import iter_jsonl, write_json, write_jsonl
from src.services.retrieval_service import (
    PromptService,
    RetrievalService,
    load_questions,
    oracle_retrieve,
    retrieval_accuracy,
)
from src.services.spectra_service import DENSE_SVD_LIMIT, SpectraService, param_report

logger = logging.getLogger(__name__)


class Services:
    """The checkpoint services of one run, wired to a shared store."""

    def __init__(self, config: RunConfig, dense_svd_limit: int = DENSE_SVD_LIMIT):
        self.store = CheckpointStore(threads=config.threads)
        self.deltas = DeltaService(self.store, threads=config.threads, progress=config.progress)
        self.spectra = SpectraService(
            self.store,
            seed=config.seed,
            dense_svd_limit=dense_svd_limit,
            threads=config.threads,
            progress=config.progress,
        )
        self.peft = PeftService(self.store, threads=config.threads)
        self.merge = MergeService(
            self.store,
            self.deltas,
            self.spectra,
            threads=config.threads,
            progress=config.progress,
        )


def _with_suffix(path: str, suffix: str) -> Path:
    """OUT.ext → OUT.suffix, used for default report locations."""
    path = Path(path)
    return path.with_name(path.name.split(".")[0] + suffix)


def load_dense_adapter(services: Services, path: str) -> DeltaAdapter:
    """Dense adapter from a dense or LoRE container."""
    merge = services.merge
    return merge.load_term_adapter(MergeTerm(path, 1.0, merge.term_kind(path)))


def cmd_diff(args, config: RunConfig) -> int:
    services = Services(config)
    base = services.store.load(args.base)
    instruct = services.store.load(args.instruct)
    report = validate_pair(base, instruct)
    if args.report:
        write_json(args.report, report.to_dict())
    for line in report.summary_lines():
        print(line)
    if not report.diffable and not args.skip_unmatched:
        raise NotDiffable(report)

    delta = services.deltas.extract(
        base,
        instruct,
        skip_unmatched=args.skip_unmatched,
        dtype=DType(args.dtype),
        metadata={"base_path": str(args.base), "instruct_path": str(args.instruct)},
    )
    services.deltas.save(delta, args.out)
    if args.stats:
        services.deltas.write_stats(args.stats, services.deltas.stats(base, delta))
    print(f"re-adapter: {len(delta)} tensors -> {args.out}")
    print(f"base digest: {delta.base_digest}")
    print(f"instruct digest: {delta.instruct_digest}")
    return 0


def cmd_compress(args, config: RunConfig) -> int:
    services = Services(config, dense_svd_limit=args.dense_svd_limit)
    delta = services.deltas.load(args.delta)
    lore = services.spectra.compress(
        delta, args.tau, min_dim=args.min_dim, storage_guard=args.storage_guard
    )
    services.spectra.save_lore(lore, args.out)

    reference = services.store.load(args.base) if args.base else Checkpoint(delta.deltas.values())
    report = param_report(lore, reference)
    data = dict(report._asdict())
    data["tau"] = args.tau
    write_json(args.report or _with_suffix(args.out, ".params.json"), data)

    if args.sweep:
        rows = services.spectra.param_sweep(
            delta,
            reference,
            taus=args.sweep_taus,
            min_dim=args.min_dim,
            storage_guard=args.storage_guard,
        )
        services.spectra.write_param_sweep(args.sweep, rows)

    print(f"lore-adapter: {report.factored} factored, {report.dense} dense -> {args.out}")
    print(f"parameters: {report.lore_params} ({report.percent:.2f}% of {report.base_params})")
    return 0


def cmd_spectrum(args, config: RunConfig) -> int:
    services = Services(config, dense_svd_limit=args.dense_svd_limit)
    delta = services.deltas.load(args.delta)
    summaries = services.spectra.spectrum_reports(
        delta, args.out_dir, layers=args.layers, tau=args.tau
    )
    if not summaries:
        logger.warning("no 2-D tensor matched; only an empty summary was written")
    for s in summaries:
        print(f"{s.name} [{s.rows}x{s.cols}] rank@{args.tau}={s.rank_at_tau} retained={s.retained:.4f}")
    return 0


def _recipe_from_args(args, merge: MergeService) -> MergeRecipe:
    if args.recipe:
        if args.base or args.knowledge or args.re_adapter:
            raise UsageError("--recipe replaces --base/--knowledge/--re-adapter")
        recipe = MergeRecipe.from_file(args.recipe, allow_extrapolation=args.allow_extrapolation)
        if args.dtype:
            recipe.dtype = DType(args.dtype)
        recipe.verify_digests = recipe.verify_digests or args.verify_digests
        return recipe
    if not args.base:
        raise UsageError("merge needs --base or --recipe")
    terms = []
    if args.knowledge:
        terms.append(MergeTerm(args.knowledge, args.alpha, merge.term_kind(args.knowledge)))
    if args.re_adapter:
        terms.append(MergeTerm(args.re_adapter, args.beta, merge.term_kind(args.re_adapter)))
    if not terms:
        logger.warning("no adapters given; the output equals the base")
    return MergeRecipe(
        args.base,
        terms,
        dtype=args.dtype,
        verify_digests=args.verify_digests,
        allow_extrapolation=args.allow_extrapolation,
    )


def cmd_merge(args, config: RunConfig) -> int:
    services = Services(config)
    recipe = _recipe_from_args(args, services.merge)
    merged = services.merge.compose(recipe)
    index = services.store.save(merged, args.out, max_shard_bytes=args.max_shard_bytes)
    where = f"{len(index.shard_files)} shards" if index else args.out
    print(f"merged {len(recipe.terms)} terms into {len(merged)} tensors -> {where}")
    print(f"digest: {merged.source_digest}")
    return 0


def cmd_sweep(args, config: RunConfig) -> int:
    services = Services(config)
    base = services.store.load(args.base)
    knowledge = load_dense_adapter(services, args.knowledge) if args.knowledge else None
    re_adapter = load_dense_adapter(services, args.re_adapter) if args.re_adapter else None
    points = services.merge.sweep(
        base,
        knowledge,
        re_adapter,
        args.alphas,
        args.betas,
        args.out_dir,
        dtype=DType(args.dtype) if args.dtype else None,
        allow_extrapolation=args.allow_extrapolation,
        verify_digests=args.verify_digests,
    )
    for point in points:
        print(f"alpha={point.alpha:g} beta={point.beta:g} {point.path}")
    return 0


def cmd_densify(args, config: RunConfig) -> int:
    services = Services(config)
    base = services.store.load(args.base) if args.base else None
    bundle = services.peft.load_dir(args.adapter_dir, base.names if base is not None else None)
    knowledge = services.peft.densify(bundle, base)
    knowledge.metadata["adapter_dir"] = str(args.adapter_dir)
    services.deltas.save(knowledge, args.out)
    style = "DoRA" if bundle.config.use_dora else "LoRA"
    print(f"knowledge-adapter ({style}, r={bundle.config.r}): {len(knowledge)} tensors -> {args.out}")
    return 0


def _dtype_histogram(tensors: Iterable[NamedTensor]) -> str:
    counts = Counter(t.dtype.value for t in tensors)
    return ", ".join(f"{dtype}={counts[dtype]}" for dtype in sorted(counts))


def _metadata_lines(metadata: Dict[str, str]) -> List[str]:
    return [f"  {key}: {metadata[key]}" for key in sorted(metadata)]


def _inspect_lines(services: Services, path: str) -> List[str]:
    target = Path(path)
    if target.is_dir() and (target / CONFIG_FILENAME).is_file():
        bundle = services.peft.load_dir(target)
        cfg = bundle.config
        return [
            f"peft adapter: {'DoRA' if cfg.use_dora else 'LoRA'}",
            f"r={cfg.r} alpha={cfg.lora_alpha:g} scaling={cfg.scaling:g}",
            f"modules: {len(bundle.modules)}",
            f"targets: {', '.join(cfg.target_modules)}",
        ]

    if target.is_file() and not is_shard_index(target):
        metadata = services.store.read_metadata(target)
        if "kind" in metadata:
            adapter = services.merge.load_adapter(target)
            if isinstance(adapter, LoreAdapter):
                lines = [
                    f"lore-adapter: tau={adapter.tau:g}",
                    f"factored: {len(adapter.factors)} dense: {len(adapter.dense)} "
                    f"parameters: {adapter.param_count}",
                ]
                lines.extend(
                    f"  {f.name} {list(f.shape)} rank={f.rank} retained={f.retained_variance:.4f}"
                    for f in adapter.factors.values()
                )
            else:
                lines = [
                    f"{adapter.kind.value}: {len(adapter)} tensors",
                    f"dtypes: {_dtype_histogram(adapter.deltas.values())}",
                ]
            return lines + ["metadata:"] + _metadata_lines(metadata)

    ckpt = services.store.load(target)
    lines = [
        f"checkpoint: {len(ckpt)} tensors, {ckpt.total_elements} elements, {ckpt.total_bytes} bytes",
        f"dtypes: {_dtype_histogram(ckpt.tensors.values())}",
        f"digest: {ckpt.source_digest}",
    ]
    if ckpt.metadata:
        lines += ["metadata:"] + _metadata_lines(ckpt.metadata)
    return lines


def cmd_inspect(args, config: RunConfig) -> int:
    for line in _inspect_lines(Services(config), args.path):
        print(line)
    return 0


def cmd_score(args, config: RunConfig) -> int:
    evaluator = EvalService(lowercase=args.lowercase, strip_punctuation=args.strip_punctuation)
    report = evaluator.score_file(args.predictions, args.references)
    json_path = args.out_json or _with_suffix(args.predictions, ".scores.json")
    csv_path = args.out_csv or _with_suffix(args.predictions, ".scores.csv")
    evaluator.write_report(report, json_path, csv_path, precision=args.precision)
    summary = report.to_dict(args.precision)
    print(f"n={summary['n']} rouge_l_recall={summary['rouge_l_recall']} exact_match={summary['exact_match']}")
    return 0


def cmd_index(args, config: RunConfig) -> int:
    retrieval = RetrievalService(k1=args.k1, b=args.b)
    index = retrieval.build_index(retrieval.load_corpus(args.corpus))
    retrieval.save_index(index, args.out)
    print(f"indexed {index.doc_count} passages, {len(index.postings)} terms -> {args.out}")
    return 0


def _retrieve_rows(args, retrieval: RetrievalService) -> List[Dict[str, object]]:
    questions = load_questions(args.questions)
    if args.oracle:
        if not args.corpus:
            raise UsageError("--oracle needs --corpus")
        corpus = {p.id: p for p in retrieval.load_corpus(args.corpus)}
        # the gold passage is the single hit, scored as a certain match
        return [
            {"id": q.id, "retrieved": [oracle_retrieve(q, corpus).id], "scores": [1.0]}
            for q in questions
        ]
    index = retrieval.load_index(args.index)
    rows = []
    for q in questions:
        hits = retrieval.query(index, q.question, top_k=args.top_k)
        rows.append(
            {"id": q.id, "retrieved": [h.passage_id for h in hits], "scores": [h.score for h in hits]}
        )
    return rows


def cmd_retrieve(args, config: RunConfig) -> int:
    rows = _retrieve_rows(args, RetrievalService())
    write_jsonl(args.out, rows)
    print(f"retrieved for {len(rows)} questions -> {args.out}")

    gold = {q.id: q.gold_passage_id for q in load_questions(args.questions)}
    if rows and all(gold.values()):
        results = {row["id"]: row["retrieved"] for row in rows}
        summary = {
            "n": len(rows),
            "k": args.top_k,
            "accuracy_at_1": retrieval_accuracy(results, gold, at_k=1),
            "accuracy_at_k": retrieval_accuracy(results, gold, at_k=args.top_k),
        }
        write_json(args.summary or _with_suffix(args.out, ".summary.json"), summary)
        print(f"accuracy@1={summary['accuracy_at_1']:.4f} accuracy@{args.top_k}={summary['accuracy_at_k']:.4f}")
    else:
        logger.info("questions lack gold passage ids; no accuracy summary written")
    return 0


def _contexts(args, retrieval: RetrievalService) -> Dict[str, str]:
    """Question id → text of its top retrieved passage."""
    if not args.retrieved:
        return {}
    if not args.corpus:
        raise UsageError("--retrieved needs --corpus to resolve passage ids")
    corpus = {p.id: p for p in retrieval.load_corpus(args.corpus)}
    contexts = {}
    for row in iter_jsonl(args.retrieved):
        retrieved = row.get("retrieved") or []
        if retrieved and retrieved[0] in corpus:
            contexts[str(row["id"])] = corpus[retrieved[0]].text
    return contexts


def cmd_prompt(args, config: RunConfig) -> int:
    prompts = PromptService()
    contexts = _contexts(args, RetrievalService())
    records = []
    for q in load_questions(args.questions):
        messages = prompts.render(args.template, q.question, context=contexts.get(q.id))
        records.append({"id": q.id, "messages": [m._asdict() for m in messages]})
    write_jsonl(args.out, records)
    print(f"rendered {len(records)} prompts with {args.template} -> {args.out}")
    return 0


COMMANDS: Dict[str, Callable[..., int]] = {
    "diff": cmd_diff,
    "compress": cmd_compress,
    "spectrum": cmd_spectrum,
    "merge": cmd_merge,
    "sweep": cmd_sweep,
    "densify": cmd_densify,
    "inspect": cmd_inspect,
    "score": cmd_score,
    "index": cmd_index,
    "retrieve": cmd_retrieve,
    "prompt": cmd_prompt,
}
