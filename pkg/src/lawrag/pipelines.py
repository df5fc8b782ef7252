"""Experiment runners: retrieval, QA, visual retrieval, VQA, and resume.

A run is driven by an ExperimentSpec and produces one record per question,
sorted by question id. With a run directory the spec manifest is written
first, each finished record is appended to a partial file, and the final
record file, run file(s), and summary are emitted on completion, so an
interrupted run resumes without re-asking the backends for finished
questions and the final outputs are byte-identical to an uninterrupted run.
Wall-clock timings are volatile by nature and live in a separate sidecar,
never in the record file.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import metrics
from .data import (
    Corpus,
    QAItem,
    article_title_metadata,
    doc_embedding_text,
    dumps_record,
    format_options,
    sign_embedding_text,
)
from .errors import (
    GenerationRefusedError,
    LawragError,
    ResumeError,
    RewriteError,
    TransportError,
)
from .llm import (
    CaptionCache,
    ChatBackend,
    ResponseCache,
    complete,
    count_reasoning_steps,
    generate_caption,
    parse_answer_letters,
    render_prompt,
    rewrite_query,
    user_request,
)
from .retrieval import (
    CAPTION_STRATEGIES,
    REWRITE_STRATEGIES,
    EmbeddingBackend,
    QueryStrategy,
    RerankerBackend,
    RetrievalRun,
    VectorIndex,
    build_index,
    build_query,
    rerank,
    search,
    write_run_file,
)
from .strategies import (
    VQA_BEST_LAWS_ROW,
    VQA_BEST_SIGNS_ROW,
    VIR_LAWS_ROWS,
    VIR_SIGNS_ROWS,
    ExperimentSpec,
    Task,
    spec_digest,
    spec_from_dict,
    spec_to_dict,
)
from .trainset import split_question_ids

RetrieverFn = Callable[[QAItem, str, int], Sequence[tuple[str, float]]]

MANIFEST_NAME = "manifest.json"
RECORDS_NAME = "records.jsonl"
PARTIAL_NAME = "records.partial.jsonl"
TIMINGS_NAME = "timings.jsonl"
SUMMARY_NAME = "summary.csv"

MISSING_IMAGE_FLAG = "missing-image"
REWRITE_FALLBACK_FLAG = "rewrite-fallback"
GENERATION_ERROR_FLAG = "generation-error"

# Caption section header reused when a caption rides inside the question
# binding (the VQA templates have no caption placeholder of their own).
CAPTION_HEADER = "Aceasta este descrierea imaginii:"


@dataclass
class PipelineBackends:
    """Everything a runner may call out to; unused members can stay None.

    ``retriever``/``sign_retriever`` override dense retrieval entirely
    (item, query_text, k) -> ranked (doc_id, score) pairs with
    non-increasing scores; tests use them for scripted retrieval.
    """

    embedding: EmbeddingBackend | None = None
    chat: ChatBackend | None = None
    vision: ChatBackend | None = None
    reranker: RerankerBackend | None = None
    retriever: RetrieverFn | None = None
    sign_retriever: RetrieverFn | None = None
    response_cache: ResponseCache | None = None
    caption_cache: CaptionCache | None = None

    def vision_backend(self) -> ChatBackend | None:
        return self.vision or self.chat


@dataclass
class ExperimentRecord:
    """One evaluated question. ``timing`` is volatile and never serialized."""

    question_id: str
    task: str
    strategy_row: str
    split: str
    partition: str
    category: str
    secondary_category: str | None = None
    query: str | None = None
    retrieved: tuple[tuple[str, float], ...] = ()
    retrieved_signs: tuple[tuple[str, float], ...] = ()
    prompt_digest: str | None = None
    prompt: str | None = None
    raw_output: str | None = None
    parsed: dict | None = None
    tendency: str | None = None
    scores: dict = field(default_factory=dict)
    flags: tuple[str, ...] = ()
    timing: float | None = None

    def to_dict(self) -> dict:
        out = {
            "question_id": self.question_id,
            "task": self.task,
            "strategy_row": self.strategy_row,
            "split": self.split,
            "partition": self.partition,
            "category": self.category,
            "secondary_category": self.secondary_category,
            "query": self.query,
            "retrieved": [[d, s] for d, s in self.retrieved],
            "retrieved_signs": [[d, s] for d, s in self.retrieved_signs],
            "prompt_digest": self.prompt_digest,
            "raw_output": self.raw_output,
            "parsed": self.parsed,
            "tendency": self.tendency,
            "scores": self.scores,
            "flags": list(self.flags),
        }
        if self.prompt is not None:
            out["prompt"] = self.prompt
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentRecord":
        return cls(
            question_id=data["question_id"],
            task=data["task"],
            strategy_row=data["strategy_row"],
            split=data["split"],
            partition=data["partition"],
            category=data["category"],
            secondary_category=data.get("secondary_category"),
            query=data.get("query"),
            retrieved=tuple((d, float(s)) for d, s in data.get("retrieved", [])),
            retrieved_signs=tuple((d, float(s)) for d, s in data.get("retrieved_signs", [])),
            prompt_digest=data.get("prompt_digest"),
            prompt=data.get("prompt"),
            raw_output=data.get("raw_output"),
            parsed=data.get("parsed"),
            tendency=data.get("tendency"),
            scores=data.get("scores", {}),
            flags=tuple(data.get("flags", [])),
        )

    @property
    def excluded(self) -> bool:
        return MISSING_IMAGE_FLAG in self.flags


@dataclass
class RunResult:
    records: list[ExperimentRecord]
    summary: list[dict]
    skipped: list[tuple[str, str]]  # (question_id, reason)
    run_dir: Path | None = None


# ---------------------------------------------------------------------------
# index construction helpers

def build_article_index(
    corpus: Corpus,
    backend: EmbeddingBackend,
    budget: int = 384,
    include_abrogated: bool = False,
) -> VectorIndex:
    """Index active articles under their embedding texts.

    Abrogated articles stay loaded in the corpus but are excluded from the
    index unless explicitly requested.
    """
    articles = corpus.articles if include_abrogated else corpus.active_articles()
    docs = [(a.id, doc_embedding_text(a, budget)) for a in articles]
    return build_index(docs, backend)


def build_sign_index(
    corpus: Corpus, backend: EmbeddingBackend, include_explanation: bool = False
) -> VectorIndex:
    docs = [(s.id, sign_embedding_text(s, include_explanation)) for s in corpus.signs]
    return build_index(docs, backend)


def article_prompt_texts(corpus: Corpus) -> dict[str, str]:
    """Untruncated per-article text used inside prompts and for reranking."""
    out = {}
    for a in corpus.articles:
        head = article_title_metadata(a)
        out[a.id] = head + "\n\n" + a.body if a.body else head
    return out


def sign_prompt_texts(corpus: Corpus) -> dict[str, str]:
    return {s.id: sign_embedding_text(s, include_explanation=True) for s in corpus.signs}


# ---------------------------------------------------------------------------
# execution engine

class _Execution:
    def __init__(
        self,
        spec: ExperimentSpec,
        corpus: Corpus,
        dataset: Sequence[QAItem],
        backends: PipelineBackends,
        image_root: str | Path | None = None,
        out_dir: str | Path | None = None,
    ):
        self.spec = spec
        self.corpus = corpus
        self.backends = backends
        self.image_root = Path(image_root) if image_root else None
        self.out_dir = Path(out_dir) if out_dir else None

        self.items = sorted(
            (i for i in dataset if i.split == spec.split), key=lambda i: i.id
        )
        if not self.items:
            raise LawragError(f"no questions with split {spec.split!r} in the dataset")

        # Train/test partition applies to s1 only; everything else is test.
        if spec.split == "s1":
            train_ids, _ = split_question_ids(
                [i.id for i in self.items], seed=spec.retrieval.partition_seed
            )
            train = set(train_ids)
            self.partition = {i.id: ("train" if i.id in train else "test") for i in self.items}
        else:
            self.partition = {i.id: "test" for i in self.items}

        self._article_index: VectorIndex | None = None
        self._sign_index: VectorIndex | None = None
        self._article_texts: dict[str, str] | None = None
        self._sign_texts: dict[str, str] | None = None
        self._corpus_order = {a.id: n for n, a in enumerate(corpus.articles)}
        self._sign_order = {s.id: n for n, s in enumerate(corpus.signs)}
        self._validate_wiring()

    # -- wiring checks ------------------------------------------------------

    def _needs_chat(self) -> bool:
        if self.spec.task in (Task.QA, Task.VQA):
            return True
        strategy = self.spec.retrieval.strategy
        return strategy in REWRITE_STRATEGIES or strategy in CAPTION_STRATEGIES

    def _validate_wiring(self):
        spec, b = self.spec, self.backends
        if self._needs_chat() and b.vision_backend() is None and b.chat is None:
            raise LawragError(f"task {spec.task.value} row {spec.strategy_row} needs a chat backend")
        needs_article_index = (
            spec.task is Task.IR
            or spec.task is Task.VIR_LAWS
            or (spec.task in (Task.QA, Task.VQA) and spec.rag_mode == "retrieved")
        )
        if needs_article_index and b.retriever is None and b.embedding is None:
            raise LawragError("retrieval requested but neither embedding backend nor retriever override is set")
        needs_sign_index = spec.task is Task.VIR_SIGNS or (
            spec.task is Task.VQA and spec.rag_mode == "retrieved"
        )
        if needs_sign_index and b.sign_retriever is None and b.embedding is None:
            raise LawragError("sign retrieval requested but neither embedding backend nor sign retriever override is set")
        if spec.retrieval.rerank and b.reranker is None:
            raise LawragError(f"strategy row {spec.strategy_row} reranks but no reranker backend is set")
        if spec.task is Task.VQA and spec.vqa_input in ("image_qa", "image_caption_qa"):
            if not spec.model.vision:
                raise LawragError(f"model {spec.model.id} is not marked vision-capable but the input variant sends images")

    # -- lazy shared state --------------------------------------------------

    def article_index(self) -> VectorIndex:
        if self._article_index is None:
            self._article_index = build_article_index(
                self.corpus, self.backends.embedding, budget=self.spec.retrieval.budget
            )
        return self._article_index

    def sign_index(self) -> VectorIndex:
        if self._sign_index is None:
            explanations = self.spec.retrieval.sign_explanations
            if self.spec.task is Task.VQA:
                explanations = VIR_SIGNS_ROWS[VQA_BEST_SIGNS_ROW].sign_explanations
            self._sign_index = build_sign_index(
                self.corpus, self.backends.embedding, include_explanation=explanations
            )
        return self._sign_index

    def article_texts(self) -> dict[str, str]:
        if self._article_texts is None:
            self._article_texts = article_prompt_texts(self.corpus)
        return self._article_texts

    def sign_texts(self) -> dict[str, str]:
        if self._sign_texts is None:
            self._sign_texts = sign_prompt_texts(self.corpus)
        return self._sign_texts

    # -- shared building blocks --------------------------------------------

    def _chat_kwargs(self) -> dict:
        return {"cache": self.backends.response_cache}

    def _image_bytes(self, item: QAItem) -> bytes | None:
        if not item.image_ref:
            return None
        path = Path(item.image_ref)
        if self.image_root is not None and not path.is_absolute():
            path = self.image_root / path
        if not path.exists():
            return None
        return path.read_bytes()

    def _caption(self, item: QAItem, image: bytes) -> str:
        return generate_caption(
            image,
            self.backends.vision_backend(),
            model_id=self.spec.model.id,
            caption_cache=self.backends.caption_cache,
            temperature=self.spec.model.temperature,
            seed=self.spec.model.seed,
            **self._chat_kwargs(),
        )

    def _rewrite(self, item: QAItem, image: bytes | None, caption: str | None) -> str:
        backend = self.backends.vision_backend() if image is not None else (
            self.backends.chat or self.backends.vision_backend()
        )
        return rewrite_query(
            item,
            backend,
            model_id=self.spec.model.id,
            image=image,
            caption=caption,
            temperature=self.spec.model.temperature,
            seed=self.spec.model.seed,
            **self._chat_kwargs(),
        )

    def _resolve_query(
        self, item: QAItem, strategy: QueryStrategy
    ) -> tuple[str, QueryStrategy, list[str]]:
        """Build the query text for a strategy, with the rewrite fallback.

        Returns (query_text, effective_strategy, flags). A failed rewrite
        falls back to CAPTION_QA (plain QA when no image is available for a
        caption) and flags the record.
        """
        flags: list[str] = []
        caption = None
        rewritten = None
        image = self._image_bytes(item) if item.image_ref else None

        if strategy in CAPTION_STRATEGIES:
            if image is None:
                raise FileNotFoundError(f"question {item.id}: image {item.image_ref!r} not readable")
            caption = self._caption(item, image)
        if strategy in REWRITE_STRATEGIES:
            uses_image = strategy is not QueryStrategy.QA_REPHRASED
            if uses_image and image is None:
                raise FileNotFoundError(f"question {item.id}: image {item.image_ref!r} not readable")
            try:
                rewritten = self._rewrite(item, image if uses_image else None, caption)
            except RewriteError:
                flags.append(REWRITE_FALLBACK_FLAG)
                if image is not None:
                    caption = caption or self._caption(item, image)
                    return build_query(item, QueryStrategy.CAPTION_QA, caption=caption), QueryStrategy.CAPTION_QA, flags
                return build_query(item, QueryStrategy.QA), QueryStrategy.QA, flags

        query = build_query(item, strategy, caption=caption, rewritten=rewritten)
        return query, strategy, flags

    def _retrieve_articles(self, item: QAItem, query: str, n: int) -> RetrievalRun:
        if self.backends.retriever is not None:
            ranked = tuple((d, float(s)) for d, s in self.backends.retriever(item, query, n))
            return RetrievalRun(question_id=item.id, query_text=query, ranked=ranked, k=n)
        return search(self.article_index(), query, self.backends.embedding, k=n, question_id=item.id)

    def _retrieve_signs(self, item: QAItem, query: str, n: int) -> RetrievalRun:
        if self.backends.sign_retriever is not None:
            ranked = tuple((d, float(s)) for d, s in self.backends.sign_retriever(item, query, n))
            return RetrievalRun(question_id=item.id, query_text=query, ranked=ranked, k=n)
        return search(self.sign_index(), query, self.backends.embedding, k=n, question_id=item.id)

    def _ir_scores(self, doc_ids: Sequence[str], gold: Sequence[str], prefix: str = "") -> dict:
        k = self.spec.retrieval.k
        return {
            f"{prefix}recall_at_{k}": metrics.recall_at_k(doc_ids, gold, k),
            f"{prefix}precision_at_{k}": metrics.precision_at_k(doc_ids, gold, k),
            f"{prefix}ndcg_at_{k}": metrics.ndcg_at_k(doc_ids, gold, k),
        }

    def _gold_articles_in_corpus_order(self, item: QAItem) -> list[str]:
        return sorted(item.legal_refs, key=lambda d: self._corpus_order[d])

    def _gold_signs_in_corpus_order(self, item: QAItem) -> list[str]:
        return sorted(item.indicator_refs, key=lambda d: self._sign_order[d])

    def _base_record(self, item: QAItem, **kwargs) -> ExperimentRecord:
        return ExperimentRecord(
            question_id=item.id,
            task=self.spec.task.value,
            strategy_row=self.spec.strategy_row,
            split=item.split,
            partition=self.partition[item.id],
            category=item.category,
            secondary_category=item.secondary_category,
            **kwargs,
        )

    def _answer(self, item: QAItem, prompt: str, image: bytes | None):
        """Send a prompt, parse the letters, and score the answer.

        Transport exhaustion and refusals do not abort the run: the record
        is flagged and scored as a format failure.
        """
        request = user_request(
            self.spec.model.id,
            prompt,
            image=image,
            temperature=self.spec.model.temperature,
            seed=self.spec.model.seed,
        )
        flags: list[str] = []
        try:
            raw = complete(request, self._answer_backend(image), **self._chat_kwargs())
        except (TransportError, GenerationRefusedError) as exc:
            flags.append(f"{GENERATION_ERROR_FLAG}: {exc}")
            raw = ""
        parsed = parse_answer_letters(raw, item.letters)
        em = metrics.exact_match(parsed.letters, item.correct)
        p, r, f1 = metrics.prf1(parsed.letters, item.correct) if parsed.ok else (0.0, 0.0, 0.0)
        tendency = metrics.selection_tendency(parsed.letters, item.correct) if parsed.ok else None
        scores = {
            "em": em if parsed.ok else 0.0,
            "precision": p,
            "recall": r,
            "f1": f1,
            "reasoning_steps": float(count_reasoning_steps(raw)),
            "format_failure": 0.0 if parsed.ok else 1.0,
        }
        parsed_dict = {
            "letters": sorted(parsed.letters),
            "marker_found": parsed.marker_found,
            "raw_tail": parsed.raw_tail,
        }
        return raw, parsed_dict, tendency, scores, flags

    def _answer_backend(self, image: bytes | None) -> ChatBackend:
        if image is not None:
            return self.backends.vision_backend()
        return self.backends.chat or self.backends.vision_backend()

    # -- task workers -------------------------------------------------------

    def _worker_ir(self, item: QAItem):
        if not item.legal_refs:
            return ("skip", (item.id, "missing-gold"))
        query, _, flags = self._resolve_query(item, self.spec.retrieval.strategy)
        cfg = self.spec.retrieval
        n = cfg.retrieve_n if cfg.rerank else cfg.k
        run = self._retrieve_articles(item, query, n)
        if cfg.rerank:
            run = rerank(run, query, self.backends.reranker, self.article_texts(), keep=cfg.k)
        scores = self._ir_scores(run.doc_ids, item.legal_refs)
        record = self._base_record(
            item, query=query, retrieved=run.ranked, scores=scores, flags=tuple(flags)
        )
        return ("record", record)

    def _worker_vir(self, item: QAItem):
        laws = self.spec.task is Task.VIR_LAWS
        gold = item.legal_refs if laws else item.indicator_refs
        if not gold:
            return ("skip", (item.id, "missing-gold"))
        strategy = self.spec.retrieval.strategy
        needs_image = strategy in REWRITE_STRATEGIES or strategy in CAPTION_STRATEGIES
        if needs_image and self._image_bytes(item) is None:
            record = self._base_record(item, flags=(MISSING_IMAGE_FLAG,))
            return ("record", record)
        query, _, flags = self._resolve_query(item, strategy)
        k = self.spec.retrieval.k
        run = self._retrieve_articles(item, query, k) if laws else self._retrieve_signs(item, query, k)
        scores = self._ir_scores(run.doc_ids, gold)
        record = self._base_record(
            item, query=query, retrieved=run.ranked, scores=scores, flags=tuple(flags)
        )
        return ("record", record)

    def _qa_template(self, with_docs: bool) -> str:
        spec = self.spec
        if spec.generation == "initial":
            if not spec.cot:
                raise LawragError("the initial prompt generation has no no-CoT variant")
            return "qa_rag" if with_docs else "qa_norag"
        if spec.cot:
            return "qa_rag_better" if with_docs else "qa_norag_better"
        if not with_docs:
            raise LawragError("the no-CoT better prompt requires documents")
        return "qa_better_nocot"

    def _worker_qa(self, item: QAItem):
        spec = self.spec
        flags: list[str] = []
        retrieved: tuple[tuple[str, float], ...] = ()
        docs: list[tuple[str, str]] | None = None
        query = None
        ir_scores: dict = {}

        if spec.rag_mode == "ideal":
            if not item.legal_refs:
                return ("skip", (item.id, "missing-gold"))
            texts = self.article_texts()
            docs = [(d, texts[d]) for d in self._gold_articles_in_corpus_order(item)]
        elif spec.rag_mode == "retrieved":
            query, _, q_flags = self._resolve_query(item, spec.retrieval.strategy)
            flags.extend(q_flags)
            run = self._retrieve_articles(item, query, spec.retrieval.k)
            retrieved = run.ranked
            texts = self.article_texts()
            docs = [(d, texts[d]) for d in run.doc_ids]
            if item.legal_refs:
                ir_scores = self._ir_scores(run.doc_ids, item.legal_refs)

        with_docs = docs is not None
        bindings: dict = {"question": item.question, "answers": format_options(item.options)}
        if with_docs:
            bindings["documents"] = docs
        prompt = render_prompt(self._qa_template(with_docs), bindings)

        raw, parsed, tendency, scores, a_flags = self._answer(item, prompt, image=None)
        flags.extend(a_flags)
        scores.update(ir_scores)
        record = self._base_record(
            item,
            query=query,
            retrieved=retrieved,
            prompt_digest=hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            prompt=prompt if spec.store_prompts else None,
            raw_output=raw,
            parsed=parsed,
            tendency=tendency,
            scores=scores,
            flags=tuple(flags),
        )
        return ("record", record)

    def _worker_vqa(self, item: QAItem):
        spec = self.spec
        variant = spec.vqa_input
        image = self._image_bytes(item)
        if image is None:
            record = self._base_record(item, flags=(MISSING_IMAGE_FLAG,))
            return ("record", record)

        flags: list[str] = []
        caption = None
        if variant in ("caption_qa", "image_caption_qa"):
            caption = self._caption(item, image)

        retrieved: tuple[tuple[str, float], ...] = ()
        retrieved_signs: tuple[tuple[str, float], ...] = ()
        docs_laws: list[tuple[str, str]] = []
        docs_signs: list[tuple[str, str]] = []
        ir_scores: dict = {}
        k = spec.retrieval.k

        if spec.rag_mode == "ideal":
            texts = self.article_texts()
            sign_texts = self.sign_texts()
            docs_laws = [(d, texts[d]) for d in self._gold_articles_in_corpus_order(item)]
            docs_signs = [(d, sign_texts[d]) for d in self._gold_signs_in_corpus_order(item)]
        elif spec.rag_mode == "retrieved":
            # Best-RAG binding: laws through the image rewrite-plus-QA row,
            # signs through caption+QA over the explanation-bearing index.
            laws_strategy = VIR_LAWS_ROWS[VQA_BEST_LAWS_ROW].strategy
            signs_strategy = VIR_SIGNS_ROWS[VQA_BEST_SIGNS_ROW].strategy
            law_query, _, law_flags = self._resolve_query(item, laws_strategy)
            flags.extend(law_flags)
            law_run = self._retrieve_articles(item, law_query, k)
            retrieved = law_run.ranked
            sign_query, _, sign_flags = self._resolve_query(item, signs_strategy)
            flags.extend(sign_flags)
            sign_run = self._retrieve_signs(item, sign_query, k)
            retrieved_signs = sign_run.ranked
            texts = self.article_texts()
            sign_texts = self.sign_texts()
            docs_laws = [(d, texts[d]) for d in law_run.doc_ids]
            docs_signs = [(d, sign_texts[d]) for d in sign_run.doc_ids]
            if item.legal_refs:
                ir_scores.update(self._ir_scores(law_run.doc_ids, item.legal_refs, prefix="laws_"))
            if item.indicator_refs:
                ir_scores.update(self._ir_scores(sign_run.doc_ids, item.indicator_refs, prefix="signs_"))

        question_binding = item.question
        if caption is not None:
            question_binding = f"{item.question}\n\n{CAPTION_HEADER}\n\n{caption}"
        bindings: dict = {"question": question_binding, "answers": format_options(item.options)}
        if spec.rag_mode == "none":
            template = "vqa_norag"
        else:
            template = "vqa_rag"
            bindings["documents_laws"] = docs_laws
            bindings["documents_indicators"] = docs_signs
        prompt = render_prompt(template, bindings)

        sent_image = image if variant in ("image_qa", "image_caption_qa") else None
        raw, parsed, tendency, scores, a_flags = self._answer(item, prompt, image=sent_image)
        flags.extend(a_flags)
        scores.update(ir_scores)
        record = self._base_record(
            item,
            retrieved=retrieved,
            retrieved_signs=retrieved_signs,
            prompt_digest=hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
            prompt=prompt if spec.store_prompts else None,
            raw_output=raw,
            parsed=parsed,
            tendency=tendency,
            scores=scores,
            flags=tuple(flags),
        )
        return ("record", record)

    def _worker(self):
        return {
            Task.IR: self._worker_ir,
            Task.QA: self._worker_qa,
            Task.VIR_LAWS: self._worker_vir,
            Task.VIR_SIGNS: self._worker_vir,
            Task.VQA: self._worker_vqa,
        }[self.spec.task]

    # -- orchestration ------------------------------------------------------

    def execute(self, preloaded: Sequence[ExperimentRecord] = ()) -> RunResult:
        done = {r.question_id for r in preloaded}
        todo = [i for i in self.items if i.id not in done]
        worker = self._worker()

        records: list[ExperimentRecord] = list(preloaded)
        skipped: list[tuple[str, str]] = []

        partial_fh = None
        timings_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._write_manifest()
            partial_fh = open(self.out_dir / PARTIAL_NAME, "a", encoding="utf-8")
            timings_fh = open(self.out_dir / TIMINGS_NAME, "a", encoding="utf-8")

        def timed(item: QAItem):
            start = time.perf_counter()
            result = worker(item)
            if result[0] == "record":
                result[1].timing = time.perf_counter() - start
            return result

        try:
            with ThreadPoolExecutor(max_workers=self.spec.concurrency) as pool:
                pending = {pool.submit(timed, item) for item in todo}
                try:
                    while pending:
                        finished, pending = wait(pending, return_when=FIRST_COMPLETED)
                        for fut in finished:
                            kind, payload = fut.result()
                            if kind == "skip":
                                skipped.append(payload)
                                continue
                            record = payload
                            records.append(record)
                            if partial_fh is not None:
                                partial_fh.write(dumps_record(record.to_dict()) + "\n")
                                partial_fh.flush()
                            if timings_fh is not None:
                                timings_fh.write(
                                    json.dumps(
                                        {"question_id": record.question_id, "seconds": record.timing}
                                    )
                                    + "\n"
                                )
                except BaseException:
                    # Interrupts and worker errors stop the run NOW; queued
                    # questions stay unasked so resume can pick them up.
                    pool.shutdown(wait=True, cancel_futures=True)
                    raise
        finally:
            if partial_fh is not None:
                partial_fh.close()
            if timings_fh is not None:
                timings_fh.close()

        records.sort(key=lambda r: r.question_id)
        skipped.sort()
        summary = self._summarize(records, skipped)

        if self.out_dir is not None:
            self._write_outputs(records, summary)
        return RunResult(records=records, summary=summary, skipped=skipped, run_dir=self.out_dir)

    def _write_manifest(self):
        path = self.out_dir / MANIFEST_NAME
        digest = spec_digest(self.spec)
        if path.exists():
            existing = json.loads(path.read_text(encoding="utf-8"))
            if existing.get("spec_digest") != digest:
                raise ResumeError(
                    f"{self.out_dir} belongs to a different experiment "
                    f"(manifest digest {existing.get('spec_digest')!r}, this spec {digest!r})"
                )
            return
        manifest = {"format": 1, "spec": spec_to_dict(self.spec), "spec_digest": digest}
        path.write_text(
            json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
            encoding="utf-8",
        )

    def _summarize(
        self, records: Sequence[ExperimentRecord], skipped: Sequence[tuple[str, str]]
    ) -> list[dict]:
        """One row per partition: macro means over non-excluded records."""
        skip_partition: dict[str, int] = {}
        for qid, _ in skipped:
            part = self.partition.get(qid, "test")
            skip_partition[part] = skip_partition.get(part, 0) + 1

        partitions = sorted({r.partition for r in records} | set(skip_partition))
        rows = []
        for part in partitions:
            members = [r for r in records if r.partition == part and not r.excluded]
            excluded = sum(1 for r in records if r.partition == part and r.excluded)
            row: dict = {
                "partition": part,
                "count": len(members),
                "excluded": excluded,
                "skipped": skip_partition.get(part, 0),
            }
            keys = sorted({k for r in members for k in r.scores})
            for key in keys:
                having = [r.scores[key] for r in members if key in r.scores]
                row[key] = sum(having) / len(having) if having else 0.0
            rows.append(row)
        return rows

    def _write_outputs(self, records: Sequence[ExperimentRecord], summary: list[dict]):
        record_text = "".join(dumps_record(r.to_dict()) + "\n" for r in records)
        (self.out_dir / RECORDS_NAME).write_text(record_text, encoding="utf-8")

        self._write_run_files(records)
        self._write_summary(summary)
        partial = self.out_dir / PARTIAL_NAME
        if partial.exists():
            partial.unlink()

    def _run_file_entries(self, records, attr: str):
        runs = []
        strategy = self.spec.retrieval.strategy
        if self.spec.task is Task.VQA:
            row = VIR_LAWS_ROWS[VQA_BEST_LAWS_ROW] if attr == "retrieved" else VIR_SIGNS_ROWS[VQA_BEST_SIGNS_ROW]
            strategy = row.strategy
        for r in records:
            ranked = getattr(r, attr)
            if not ranked:
                continue
            runs.append(
                RetrievalRun(
                    question_id=r.question_id,
                    query_text=r.query or "",
                    ranked=ranked,
                    strategy=strategy,
                    k=len(ranked),
                )
            )
        return runs

    def _write_run_files(self, records):
        if self.spec.task is Task.VQA:
            laws = self._run_file_entries(records, "retrieved")
            signs = self._run_file_entries(records, "retrieved_signs")
            if laws:
                write_run_file(laws, self.out_dir / "run_laws.txt")
            if signs:
                write_run_file(signs, self.out_dir / "run_signs.txt")
            return
        runs = self._run_file_entries(records, "retrieved")
        if runs:
            write_run_file(runs, self.out_dir / "run.txt")

    def _write_summary(self, summary: list[dict]):
        if not summary:
            (self.out_dir / SUMMARY_NAME).write_text("", encoding="utf-8")
            return
        columns: list[str] = []
        for row in summary:
            for key in row:
                if key not in columns:
                    columns.append(key)
        lines = [",".join(columns)]
        for row in summary:
            lines.append(",".join(str(row.get(c, "")) for c in columns))
        (self.out_dir / SUMMARY_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# public entry points

def _check_task(spec: ExperimentSpec, expected: Task):
    if spec.task is not expected:
        raise LawragError(f"spec task is {spec.task.value}, this runner handles {expected.value}")


def run_ir(spec, corpus, dataset, backends, out_dir=None, image_root=None) -> RunResult:
    """Score retrieval for every question in the split against its gold refs."""
    _check_task(spec, Task.IR)
    return _Execution(spec, corpus, dataset, backends, image_root, out_dir).execute()


def run_qa(spec, corpus, dataset, backends, out_dir=None, image_root=None) -> RunResult:
    """Answer text questions with the configured prompt/rag variant."""
    _check_task(spec, Task.QA)
    return _Execution(spec, corpus, dataset, backends, image_root, out_dir).execute()


def run_vir(spec, corpus, dataset, backends, out_dir=None, image_root=None) -> RunResult:
    """Visual retrieval: score law or sign retrieval for image questions."""
    if spec.task not in (Task.VIR_LAWS, Task.VIR_SIGNS):
        raise LawragError(f"spec task is {spec.task.value}, this runner handles VIR_LAWS/VIR_SIGNS")
    return _Execution(spec, corpus, dataset, backends, image_root, out_dir).execute()


def run_vqa(spec, corpus, dataset, backends, out_dir=None, image_root=None) -> RunResult:
    """Answer image questions, optionally grounded in retrieved laws and signs."""
    _check_task(spec, Task.VQA)
    return _Execution(spec, corpus, dataset, backends, image_root, out_dir).execute()


def run_task(spec, corpus, dataset, backends, out_dir=None, image_root=None) -> RunResult:
    """Dispatch on spec.task; the single entry point the CLI and resume use."""
    return _Execution(spec, corpus, dataset, backends, image_root, out_dir).execute()


def load_records(run_dir: str | Path) -> list[ExperimentRecord]:
    path = Path(run_dir) / RECORDS_NAME
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(ExperimentRecord.from_dict(json.loads(line)))
    return records


def load_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        raise ResumeError(f"{run_dir} has no {MANIFEST_NAME}")
    return json.loads(path.read_text(encoding="utf-8"))


def resume(
    run_dir: str | Path,
    corpus: Corpus,
    dataset: Sequence[QAItem],
    backends: PipelineBackends,
    spec: ExperimentSpec | None = None,
    image_root: str | Path | None = None,
) -> RunResult:
    """Continue an interrupted run directory to completion.

    Completed questions are read from the partial record file and never
    re-sent to a backend. The spec comes from the manifest; passing a spec
    that does not match it is refused. An empty directory starts fresh and
    then requires the spec argument. A directory whose final record file
    already exists is returned as-is.
    """
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_NAME
    if not manifest_path.exists():
        if spec is None:
            raise ResumeError(f"{run_dir} has no manifest and no spec was provided")
        return _Execution(spec, corpus, dataset, backends, image_root, run_dir).execute()

    manifest = load_manifest(run_dir)
    stored = spec_from_dict(manifest["spec"])
    if spec is not None and spec_digest(spec) != manifest["spec_digest"]:
        raise ResumeError(
            f"provided spec does not match the manifest in {run_dir}; refusing to mix runs"
        )
    execution = _Execution(stored, corpus, dataset, backends, image_root, run_dir)

    if (run_dir / RECORDS_NAME).exists():
        records = load_records(run_dir)
        # Skips are deterministic (questions without gold refs), so they can
        # be reconstructed without touching any backend.
        have = {r.question_id for r in records}
        skipped = sorted((i.id, "missing-gold") for i in execution.items if i.id not in have)
        summary = execution._summarize(records, skipped)
        return RunResult(records=records, summary=summary, skipped=skipped, run_dir=run_dir)

    preloaded: list[ExperimentRecord] = []
    seen: set[str] = set()
    partial = run_dir / PARTIAL_NAME
    if partial.exists():
        with open(partial, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = ExperimentRecord.from_dict(json.loads(line))
                if record.question_id not in seen:
                    seen.add(record.question_id)
                    preloaded.append(record)
    return execution.execute(preloaded)
