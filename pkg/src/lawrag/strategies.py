"""Experiment specification and the table-driven strategy-row registry.

Every experiment variant reported by the harness is a numbered row per task
(IR, QA, VIR over laws, VIR over signs, VQA); adding a row means adding one
registry entry here, not a new code path. Rows mirror the published
experiment matrix: starred VIR/sign rows embed sign explanations into the
index, and the best-RAG VQA configuration is pinned to laws row 5 plus signs
row 2*.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .errors import LawragError
from .retrieval import DEFAULT_K, DEFAULT_RETRIEVE_N, QueryStrategy


class Task(enum.Enum):
    IR = "IR"
    QA = "QA"
    VIR_LAWS = "VIR_LAWS"
    VIR_SIGNS = "VIR_SIGNS"
    VQA = "VQA"


RAG_MODES = ("none", "retrieved", "ideal")
GENERATIONS = ("initial", "better")
VQA_INPUTS = ("caption_qa", "image_qa", "image_caption_qa")

# The best-RAG VQA configuration: which VIR rows feed the two document lists.
VQA_BEST_LAWS_ROW = "5"
VQA_BEST_SIGNS_ROW = "2*"


@dataclass(frozen=True)
class ModelConfig:
    id: str
    temperature: float | None = 0.0
    seed: int | None = 25
    vision: bool = False


def model_config_for(model_id: str, vision: bool | None = None) -> ModelConfig:
    """Sampling defaults by model family.

    Reasoning models (o-series ids) run without temperature or seed; sampled
    models pin temperature 0 and seed 25 for repeatability. Vision is
    assumed for families known to accept images unless overridden.
    """
    reasoning = model_id.startswith(("o1", "o3", "o4"))
    if vision is None:
        vision = reasoning or model_id.startswith(("gpt-4o", "gemma-3", "mistral-small-3"))
    if reasoning:
        return ModelConfig(id=model_id, temperature=None, seed=None, vision=vision)
    return ModelConfig(id=model_id, temperature=0.0, seed=25, vision=vision)


@dataclass(frozen=True)
class RetrievalConfig:
    strategy: QueryStrategy = QueryStrategy.QA
    k: int = DEFAULT_K
    retrieve_n: int = DEFAULT_RETRIEVE_N
    rerank: bool = False
    reranker_id: str | None = None
    sign_explanations: bool = False
    budget: int = 384
    partition_seed: int = 42
    requires_finetuned: bool = False


@dataclass(frozen=True)
class ExperimentSpec:
    """Complete description of one experiment run.

    ``strategy_row`` names the registry row the config came from; the
    explicit fields are what the pipelines actually consume, so a spec can
    also be built by hand without the registry.
    """

    task: Task
    strategy_row: str
    split: str
    model: ModelConfig = field(default_factory=lambda: ModelConfig(id="offline"))
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    rag_mode: str = "none"
    generation: str = "initial"
    cot: bool = True
    vqa_input: str | None = None
    concurrency: int = 4
    store_prompts: bool = False

    def __post_init__(self):
        if self.rag_mode not in RAG_MODES:
            raise LawragError(f"unknown rag_mode {self.rag_mode!r}")
        if self.generation not in GENERATIONS:
            raise LawragError(f"unknown generation {self.generation!r}")
        if self.task is Task.VQA and self.vqa_input not in VQA_INPUTS:
            raise LawragError(
                f"VQA spec needs vqa_input in {VQA_INPUTS}, got {self.vqa_input!r}"
            )
        if self.rag_mode == "ideal" and self.split == "s2":
            raise LawragError("rag_mode=ideal is impossible on s2: no gold annotations")
        if self.concurrency < 1:
            raise LawragError("concurrency must be at least 1")


def spec_to_dict(spec: ExperimentSpec) -> dict:
    out = asdict(spec)
    out["task"] = spec.task.value
    out["retrieval"]["strategy"] = spec.retrieval.strategy.value
    return out


def spec_from_dict(data: dict) -> ExperimentSpec:
    data = json.loads(json.dumps(data))  # deep copy, tolerate json-loaded input
    retrieval = data.pop("retrieval")
    retrieval["strategy"] = QueryStrategy(retrieval["strategy"])
    model = data.pop("model")
    data["task"] = Task(data["task"])
    return ExperimentSpec(
        model=ModelConfig(**model), retrieval=RetrievalConfig(**retrieval), **data
    )


def spec_digest(spec: ExperimentSpec) -> str:
    payload = json.dumps(spec_to_dict(spec), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# row registries

@dataclass(frozen=True)
class IrRow:
    strategy: QueryStrategy
    label: str
    rerank: bool = False
    reranker_id: str | None = None
    requires_finetuned: bool = False
    augmented: bool = False


IR_ROWS: dict[str, IrRow] = {
    "1": IrRow(QueryStrategy.Q, "Question based (Q)"),
    "2": IrRow(QueryStrategy.QA, "Question + Answer Choices (QA)"),
    "3": IrRow(QueryStrategy.QA_RERANK, "QA + ReRanker jina", rerank=True, reranker_id="jina"),
    "4": IrRow(
        QueryStrategy.QA_RERANK,
        "QA + ReRanker bert-msmarco",
        rerank=True,
        reranker_id="bert-msmarco",
    ),
    "5": IrRow(QueryStrategy.QA_REPHRASED, "QA rephrased using GPT 4o-mini"),
    "6": IrRow(QueryStrategy.QA, "Finetuned Retriever", requires_finetuned=True),
    "7": IrRow(
        QueryStrategy.QA,
        "Finetuned Retriever + ReRanker jina",
        rerank=True,
        reranker_id="jina",
        requires_finetuned=True,
    ),
    "8": IrRow(
        QueryStrategy.QA,
        "Augmented Finetuned Retriever",
        requires_finetuned=True,
        augmented=True,
    ),
}


@dataclass(frozen=True)
class QaRow:
    model_family: str
    rag_mode: str
    generation: str
    cot: bool
    label: str


QA_ROWS: dict[str, QaRow] = {
    "1": QaRow("gpt-4o-mini", "retrieved", "initial", True, "GPT-4o mini + CoT + RAG"),
    "2": QaRow("gpt-4o-mini", "none", "initial", True, "GPT-4o mini + CoT w/o RAG"),
    "3": QaRow("gpt-4o-mini", "ideal", "initial", True, "GPT-4o mini + CoT + Ideal RAG"),
    "4": QaRow(
        "gpt-4o-mini", "retrieved", "better", True, "GPT-4o mini + CoT + RAG + better prompt"
    ),
    "5": QaRow(
        "gpt-4o-mini", "retrieved", "better", False, "GPT-4o mini + RAG + better prompt w/o CoT"
    ),
    "6": QaRow("o4-mini", "retrieved", "better", True, "o4-mini + CoT + RAG + better prompt"),
    "7": QaRow("o4-mini", "none", "better", True, "o4-mini + CoT + better prompt w/o RAG"),
    "8": QaRow("mistral-small-3.1-24b-instruct", "retrieved", "initial", True, "Mistral + CoT + RAG"),
    "9": QaRow("mistral-small-3.1-24b-instruct", "none", "initial", True, "Mistral + CoT w/o RAG"),
    "10": QaRow(
        "mistral-small-3.1-24b-instruct", "ideal", "initial", True, "Mistral + CoT + Ideal RAG"
    ),
    "11": QaRow(
        "mistral-small-3.1-24b-instruct",
        "retrieved",
        "better",
        True,
        "Mistral + CoT + RAG + better prompt",
    ),
    "12": QaRow(
        "mistral-small-3.1-24b-instruct",
        "retrieved",
        "better",
        False,
        "Mistral + RAG + better prompt w/o CoT",
    ),
    "13": QaRow("gemma-3-27b-it", "retrieved", "initial", True, "Gemma 3 + CoT + RAG"),
    "14": QaRow("gemma-3-27b-it", "none", "initial", True, "Gemma 3 + CoT w/o RAG"),
    "15": QaRow("gemma-3-27b-it", "ideal", "initial", True, "Gemma 3 + CoT + Ideal RAG"),
    "16": QaRow(
        "gemma-3-27b-it", "retrieved", "better", True, "Gemma 3 + CoT + RAG + better prompt"
    ),
    "17": QaRow(
        "gemma-3-27b-it", "retrieved", "better", False, "Gemma 3 + RAG + better prompt w/o CoT"
    ),
}


@dataclass(frozen=True)
class VirRow:
    strategy: QueryStrategy
    label: str
    sign_explanations: bool = False


_VIR_BASE: dict[str, tuple[QueryStrategy, str]] = {
    "1": (QueryStrategy.QA, "Question + Answer Choices (QA)"),
    "2": (QueryStrategy.CAPTION_QA, "Caption + QA"),
    "3": (QueryStrategy.REWRITE_IMG_QA, "R[o4-mini + Image + QA]"),
    "4": (QueryStrategy.REWRITE_IMG_CAPTION_QA, "R[o4-mini + Image + Caption + QA]"),
    "5": (QueryStrategy.REWRITE_IMG_QA_PLUS_QA, "R[o4-mini + Image + QA] + QA"),
    "6": (
        QueryStrategy.REWRITE_IMG_CAPTION_QA_PLUS_QA,
        "R[o4-mini + Image + Caption + QA] + QA",
    ),
}

VIR_LAWS_ROWS: dict[str, VirRow] = {
    row: VirRow(strategy, label) for row, (strategy, label) in _VIR_BASE.items()
}

# Signs rows exist plain and starred; the star re-indexes signs with their
# explanations embedded alongside name and category.
VIR_SIGNS_ROWS: dict[str, VirRow] = {}
for _row, (_strategy, _label) in _VIR_BASE.items():
    VIR_SIGNS_ROWS[_row] = VirRow(_strategy, _label)
    VIR_SIGNS_ROWS[_row + "*"] = VirRow(_strategy, _label + " (sign explanations)", True)


@dataclass(frozen=True)
class VqaRow:
    input_variant: str
    rag_mode: str
    label: str


VQA_ROWS: dict[str, VqaRow] = {
    "1": VqaRow("caption_qa", "none", "o4-mini + Caption + QA + CoT"),
    "2": VqaRow("image_qa", "none", "o4-mini + Image + QA + CoT"),
    "3": VqaRow("image_caption_qa", "none", "o4-mini + Image + Caption + QA + CoT"),
    "4": VqaRow("caption_qa", "ideal", "o4-mini + Caption + QA + CoT + Ideal RAG"),
    "5": VqaRow("image_qa", "ideal", "o4-mini + Image + QA + CoT + Ideal RAG"),
    "6": VqaRow("image_caption_qa", "ideal", "o4-mini + Image + Caption + QA + Ideal RAG"),
    "7": VqaRow("caption_qa", "retrieved", "o4-mini + Caption + QA + CoT + RAG"),
    "8": VqaRow("image_qa", "retrieved", "o4-mini + Image + QA + CoT + RAG"),
    "9": VqaRow("image_caption_qa", "retrieved", "o4-mini + Image + Caption + QA + RAG"),
}


def registry_for(task: Task) -> dict:
    return {
        Task.IR: IR_ROWS,
        Task.QA: QA_ROWS,
        Task.VIR_LAWS: VIR_LAWS_ROWS,
        Task.VIR_SIGNS: VIR_SIGNS_ROWS,
        Task.VQA: VQA_ROWS,
    }[task]


def make_spec(
    task: Task,
    strategy_row: str,
    split: str,
    model_id: str | None = None,
    k: int = DEFAULT_K,
    retrieve_n: int = DEFAULT_RETRIEVE_N,
    partition_seed: int = 42,
    concurrency: int = 4,
    store_prompts: bool = False,
) -> ExperimentSpec:
    """Instantiate an ExperimentSpec from a registry row.

    ``model_id`` overrides the row's default model family; rows that do not
    involve a generator fall back to an offline placeholder id.
    """
    rows = registry_for(task)
    if strategy_row not in rows:
        raise LawragError(
            f"unknown strategy row {strategy_row!r} for task {task.value}; "
            f"known rows: {sorted(rows)}"
        )
    row = rows[strategy_row]
    retrieval = RetrievalConfig(
        k=k, retrieve_n=retrieve_n, partition_seed=partition_seed
    )
    common = dict(
        task=task,
        strategy_row=strategy_row,
        split=split,
        concurrency=concurrency,
        store_prompts=store_prompts,
    )

    if task is Task.IR:
        retrieval = replace(
            retrieval,
            strategy=row.strategy,
            rerank=row.rerank,
            reranker_id=row.reranker_id,
            requires_finetuned=row.requires_finetuned,
        )
        model = model_config_for(model_id or "gpt-4o-mini")
        return ExperimentSpec(model=model, retrieval=retrieval, **common)

    if task is Task.QA:
        model = model_config_for(model_id or row.model_family)
        return ExperimentSpec(
            model=model,
            retrieval=retrieval,
            rag_mode=row.rag_mode,
            generation=row.generation,
            cot=row.cot,
            **common,
        )

    if task in (Task.VIR_LAWS, Task.VIR_SIGNS):
        retrieval = replace(
            retrieval, strategy=row.strategy, sign_explanations=row.sign_explanations
        )
        model = model_config_for(model_id or "o4-mini")
        return ExperimentSpec(model=model, retrieval=retrieval, **common)

    model = model_config_for(model_id or "o4-mini")
    return ExperimentSpec(
        model=model,
        retrieval=retrieval,
        rag_mode=row.rag_mode,
        vqa_input=row.input_variant,
        generation="better",
        **common,
    )
