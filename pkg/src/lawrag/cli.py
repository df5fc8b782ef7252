"""Command-line interface.

One executable, eight subcommands covering the full experiment lifecycle:

  ingest         validate raw corpus + question files, write canonical copies
  index          build and persist a vector index over articles or signs
  mine           hard-negative mining for retriever training
  augment        generate synthetic QA pairs from sampled article sets
  export-bundle  freeze samples + config into a trainer hand-off bundle
  run            execute one experiment row into a run directory
  resume         continue an interrupted run directory
  report         tables and figures over finished runs

A JSON config file given with --config OVERRIDES command-line flags (the
file is the reproducible record of a run; ad-hoc flags must not silently
win over it). API keys come from the LAWRAG_API_KEY environment variable
only; there is no key flag and keys in config files are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import report as report_mod
from .backends import (
    HashEmbeddingBackend,
    HttpChatBackend,
    HttpEmbeddingBackend,
    HttpRerankerBackend,
)
from .data import (
    corpus_stats,
    load_corpus,
    load_qa,
    save_corpus,
    save_qa,
)
from .errors import LawragError, TrainingDelegatedError
from .llm import CaptionCache, ResponseCache
from .pipelines import (
    PipelineBackends,
    build_article_index,
    build_sign_index,
    resume as resume_run,
    run_task,
)
from .retrieval import CachedEmbeddingBackend, save_index
from .strategies import Task, make_spec, registry_for
from .trainset import (
    AUGMENT_N_SETS,
    AUGMENT_PAIRS_PER_SET,
    N_NEGATIVES,
    TrainConfig,
    augmented_to_samples,
    dedup_filter,
    export_training_bundle,
    generate_augmented,
    load_pairs,
    load_samples,
    mine_hard_negatives,
    save_pairs,
    save_samples,
)

TASK_NAMES = {
    "ir": Task.IR,
    "qa": Task.QA,
    "vir-laws": Task.VIR_LAWS,
    "vir-signs": Task.VIR_SIGNS,
    "vqa": Task.VQA,
}


def _apply_config(args: argparse.Namespace) -> argparse.Namespace:
    """Overlay --config file values onto parsed flags. File wins."""
    if not getattr(args, "config", None):
        return args
    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise LawragError("config file must hold a JSON object")
    for key, value in raw.items():
        dest = key.replace("-", "_")
        if dest in ("api_key", "apikey", "key", "token"):
            raise LawragError(
                "credentials are not accepted in config files; "
                "export LAWRAG_API_KEY instead"
            )
        if not hasattr(args, dest):
            raise LawragError(f"config key {key!r} does not match any flag of this subcommand")
        setattr(args, dest, value)
    return args


def _load_data(data_dir: str):
    data_dir = Path(data_dir)
    corpus = load_corpus(data_dir)
    questions_path = data_dir / "questions.jsonl"
    questions = load_qa(questions_path, corpus=corpus) if questions_path.exists() else []
    return corpus, questions


def _embedding_backend(args):
    kind = args.embed_backend
    if kind == "hash" or kind.startswith("hash:"):
        dim = int(kind.split(":", 1)[1]) if ":" in kind else 256
        backend = HashEmbeddingBackend(dim=dim)
    elif kind.startswith(("http://", "https://")):
        if not args.embed_model:
            raise LawragError("--embed-model is required with an HTTP embedding backend")
        backend = HttpEmbeddingBackend(kind, model=args.embed_model)
    else:
        raise LawragError(
            f"unknown embedding backend {kind!r}; use 'hash', 'hash:DIM', or an http(s) URL"
        )
    if getattr(args, "cache_dir", None):
        backend = CachedEmbeddingBackend(backend, Path(args.cache_dir))
    return backend


def _pipeline_backends(args) -> PipelineBackends:
    embedding = _embedding_backend(args)
    chat = None
    if getattr(args, "chat_url", None):
        chat = HttpChatBackend(args.chat_url, supports_vision=not args.no_vision)
    reranker = None
    if getattr(args, "reranker_url", None):
        if not args.reranker_model:
            raise LawragError("--reranker-model is required with --reranker-url")
        reranker = HttpRerankerBackend(args.reranker_url, model=args.reranker_model)
    response_cache = caption_cache = None
    if getattr(args, "cache_dir", None):
        cache_dir = Path(args.cache_dir)
        response_cache = ResponseCache(cache_dir)
        caption_cache = CaptionCache(cache_dir)
    return PipelineBackends(
        embedding=embedding,
        chat=chat,
        reranker=reranker,
        response_cache=response_cache,
        caption_cache=caption_cache,
    )


def _add_config_flag(p):
    p.add_argument("--config", help="JSON file whose keys override these flags")


def _add_backend_flags(p, chat: bool = False, reranker: bool = False):
    p.add_argument(
        "--embed-backend",
        default="hash",
        help="'hash', 'hash:DIM', or an http(s) embeddings endpoint (default: hash)",
    )
    p.add_argument("--embed-model", help="model name for an HTTP embedding backend")
    p.add_argument("--cache-dir", help="directory for embedding/response/caption caches")
    if chat:
        p.add_argument("--chat-url", help="http(s) chat-completions endpoint")
        p.add_argument(
            "--no-vision",
            action="store_true",
            help="declare the chat endpoint unable to accept images",
        )
    if reranker:
        p.add_argument("--reranker-url", help="http(s) rerank endpoint")
        p.add_argument("--reranker-model", help="model name for the rerank endpoint")


# ---------------------------------------------------------------------------
# subcommands

def cmd_ingest(args) -> int:
    corpus, questions = _load_data(args.data_dir)
    out = Path(args.out)
    save_corpus(corpus, out)
    if questions:
        save_qa(questions, out / "questions.jsonl")
    stats = corpus_stats(corpus)
    (out / "stats.json").write_text(
        json.dumps(
            {
                "articles_by_source": stats.source_counts,
                "signs": stats.sign_count,
                "questions": len(questions),
                "under_500_tokens": round(stats.fraction_under(500), 4),
            },
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    print(f"ingested {sum(stats.source_counts.values())} articles, "
          f"{stats.sign_count} signs, {len(questions)} questions -> {out}")
    return 0


def cmd_index(args) -> int:
    corpus, _ = _load_data(args.data_dir)
    backend = _embedding_backend(args)
    if args.signs:
        index = build_sign_index(corpus, backend, include_explanation=args.explanations)
    else:
        index = build_article_index(corpus, backend, budget=args.budget)
    save_index(index, args.out)
    print(f"indexed {len(index)} docs with {index.backend_id} -> {args.out}")
    print(f"index digest: {index.digest()}")
    return 0


def cmd_mine(args) -> int:
    corpus, questions = _load_data(args.data_dir)
    items = [q for q in questions if q.split == args.split and q.legal_refs]
    backend = _embedding_backend(args)
    index = build_article_index(corpus, backend, budget=args.budget)
    samples = mine_hard_negatives(
        items, index, backend, n_negatives=args.negatives, max_workers=args.workers
    )
    save_samples(samples, args.out)
    print(f"mined {len(samples)} samples from {len(items)} questions -> {args.out}")
    return 0


def cmd_augment(args) -> int:
    corpus, _ = _load_data(args.data_dir)
    if not args.chat_url:
        raise LawragError("augment needs --chat-url for pair generation")
    chat = HttpChatBackend(args.chat_url, supports_vision=False)
    cache = ResponseCache(Path(args.cache_dir)) if args.cache_dir else None
    pairs = generate_augmented(
        corpus,
        chat,
        model_id=args.model,
        n_sets=args.sets,
        pairs_per_set=args.pairs,
        seed=args.seed,
        cache=cache,
    )
    raw = len(pairs)
    if not args.no_dedup:
        backend = _embedding_backend(args)
        dedup_filter(pairs, backend)
    kept = sum(1 for p in pairs if p.kept)
    save_pairs(pairs, args.out)
    print(f"generated {raw} pairs, kept {kept} after filtering -> {args.out}")
    return 0


def cmd_export_bundle(args) -> int:
    corpus, _ = _load_data(args.data_dir)
    samples = load_samples(args.samples)
    if args.augmented:
        pairs = load_pairs(args.augmented)
        backend = _embedding_backend(args)
        index = build_article_index(corpus, backend, budget=args.budget)
        samples = samples + augmented_to_samples(pairs, index, backend, n_negatives=args.negatives)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        warmup_ratio=args.warmup_ratio,
        eval_every_steps=args.eval_every,
        selection_metric=args.metric,
        seed=args.seed,
    )
    from .data import doc_embedding_text

    doc_texts = {a.id: doc_embedding_text(a, args.budget) for a in corpus.active_articles()}
    manifest = export_training_bundle(samples, config, doc_texts, args.out)
    print(f"bundle of {manifest['provenance']['n_samples']} samples -> {args.out}")
    print(
        "training is delegated: hand this bundle to an external trainer "
        "and plug the returned model in via --embed-backend"
    )
    return 0


def cmd_run(args) -> int:
    corpus, questions = _load_data(args.data_dir)
    task = TASK_NAMES[args.task]
    spec = make_spec(
        task,
        args.row,
        args.split,
        model_id=args.model,
        k=args.k,
        retrieve_n=args.retrieve_n,
        partition_seed=args.partition_seed,
        concurrency=args.concurrency,
        store_prompts=args.store_prompts,
    )
    backends = _pipeline_backends(args)
    result = run_task(
        spec, corpus, questions, backends, out_dir=args.out, image_root=args.data_dir
    )
    label = registry_for(task)[args.row].label
    print(f"{task.value} row {args.row} ({label}): "
          f"{len(result.records)} records, {len(result.skipped)} skipped -> {args.out}")
    for row in result.summary:
        parts = [f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}"
                 for key, value in row.items()]
        print("  " + "  ".join(parts))
    return 0


def cmd_resume(args) -> int:
    corpus, questions = _load_data(args.data_dir)
    backends = _pipeline_backends(args)
    result = resume_run(
        args.run_dir, corpus, questions, backends, image_root=args.data_dir
    )
    print(f"resumed {args.run_dir}: {len(result.records)} records, "
          f"{len(result.skipped)} skipped")
    return 0


def cmd_report(args) -> int:
    runs = [report_mod.load_run(d) for d in args.run_dir]
    table = report_mod.summary_table(runs, partition=args.partition)
    print(table.render())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table.write_csv(out / "summary.csv")
        corpus = None
        if args.data_dir:
            corpus, _ = _load_data(args.data_dir)
        written = report_mod.emit_plots(runs, out, corpus=corpus, partition=args.partition)
        if any(rec.parsed is not None for r in runs for rec in r.records):
            tt = report_mod.tendency_table(runs, partition=args.partition)
            tt.write_csv(out / "tendency.csv")
            print()
            print(tt.render())
        print(f"\nwrote {len(written) + 1} files to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lawrag",
        description="Retrieval-augmented QA experiments over a driving-law corpus",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate raw data and write canonical copies")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    _add_config_flag(p)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("index", help="build and persist a vector index")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="output .npz path")
    p.add_argument("--signs", action="store_true", help="index traffic signs instead of articles")
    p.add_argument("--explanations", action="store_true",
                   help="embed sign explanations alongside names")
    p.add_argument("--budget", type=int, default=384)
    _add_backend_flags(p)
    _add_config_flag(p)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("mine", help="mine hard negatives for retriever training")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="s1")
    p.add_argument("--negatives", type=int, default=N_NEGATIVES)
    p.add_argument("--budget", type=int, default=384)
    p.add_argument("--workers", type=int, default=4)
    _add_backend_flags(p)
    _add_config_flag(p)
    p.set_defaults(fn=cmd_mine)

    p = sub.add_parser("augment", help="generate synthetic QA pairs from article sets")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", required=True, help="generator model id")
    p.add_argument("--chat-url", help="http(s) chat-completions endpoint")
    p.add_argument("--sets", type=int, default=AUGMENT_N_SETS)
    p.add_argument("--pairs", type=int, default=AUGMENT_PAIRS_PER_SET)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--no-dedup", action="store_true")
    _add_backend_flags(p)
    _add_config_flag(p)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("export-bundle", help="freeze a training bundle for the external trainer")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--samples", required=True, help="mined samples jsonl")
    p.add_argument("--augmented", help="optional augmented pairs jsonl to merge in")
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=384)
    p.add_argument("--negatives", type=int, default=N_NEGATIVES)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--warmup-ratio", type=float, default=0.1)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--metric", default="eval_cosine_recall@10")
    p.add_argument("--seed", type=int, default=42)
    _add_backend_flags(p)
    _add_config_flag(p)
    p.set_defaults(fn=cmd_export_bundle)

    p = sub.add_parser("run", help="execute one experiment row")
    p.add_argument("--task", required=True, choices=sorted(TASK_NAMES))
    p.add_argument("--row", required=True, help="strategy row key, e.g. 1 or 2*")
    p.add_argument("--split", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--model", help="override the row's default model id")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--retrieve-n", type=int, default=40)
    p.add_argument("--partition-seed", type=int, default=42)
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--store-prompts", action="store_true",
                   help="keep full prompts in the records for audit")
    _add_backend_flags(p, chat=True, reranker=True)
    _add_config_flag(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data-dir", required=True)
    _add_backend_flags(p, chat=True, reranker=True)
    _add_config_flag(p)
    p.set_defaults(fn=cmd_resume)

    p = sub.add_parser("report", help="tables and figures over finished runs")
    p.add_argument("--run-dir", required=True, nargs="+")
    p.add_argument("--out", help="directory for CSVs and figures")
    p.add_argument("--partition", default="test")
    p.add_argument("--data-dir", help="corpus dir, enables the token-length figure")
    _add_config_flag(p)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config(args)
        return args.fn(args)
    except TrainingDelegatedError as exc:
        print(str(exc), file=sys.stderr)
        return 3
    except LawragError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
