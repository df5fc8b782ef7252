"""Retriever training-data construction.

Covers positive-aware hard-negative mining against a base index, the
deterministic train/eval partition by question id, synthetic QA-pair
generation over sampled document sets, near-duplicate filtering, and export
of a self-contained training bundle (samples plus a manifest freezing the
training configuration and input digests). The gradient loop itself is
delegated: an external trainer consumes the bundle and returns a model id.
"""

from __future__ import annotations

import hashlib
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .data import Corpus, QAItem, doc_embedding_text, dumps_record
from .errors import BundleError, MiningError, TrainingDelegatedError
from .llm import ChatBackend, ResponseCache, complete, format_documents, user_request
from .retrieval import (
    EmbeddingBackend,
    QueryStrategy,
    VectorIndex,
    build_query,
    search,
)

N_NEGATIVES = 5
TRAIN_RATIO = 0.8
AUGMENT_N_SETS = 1000
AUGMENT_SET_SIZE = (2, 6)
AUGMENT_PAIRS_PER_SET = 5
DEDUP_THRESHOLD = 0.98


@dataclass(frozen=True)
class TrainingSample:
    """One contrastive sample: a query, its positive doc, and hard negatives."""

    question_id: str
    query: str
    positive_id: str
    negative_ids: tuple[str, ...]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters frozen into the bundle manifest for the trainer."""

    epochs: int = 10
    batch_size: int = 64
    warmup_ratio: float = 0.1
    eval_every_steps: int = 100
    selection_metric: str = "eval_cosine_recall@10"
    seed: int = 42
    loss: str = "in_batch_contrastive"
    no_duplicate_batches: bool = True
    n_negatives: int = N_NEGATIVES
    train_ratio: float = TRAIN_RATIO


@dataclass
class AugmentedPair:
    """One generated synthetic QA pair and its provenance."""

    text: str
    source_doc_ids: tuple[str, ...]
    set_index: int
    pair_index: int
    kept: bool = True
    reason: str | None = None


# ---------------------------------------------------------------------------
# hard-negative mining

def mine_hard_negatives(
    items: Sequence[QAItem],
    index: VectorIndex,
    backend: EmbeddingBackend,
    n_negatives: int = N_NEGATIVES,
    max_workers: int = 4,
) -> list[TrainingSample]:
    """Mine positive-aware hard negatives for every (item, gold ref) pair.

    The query is the item's QA text; negatives are the best-ranked documents
    that are not among ANY of the item's gold refs, kept in rank order and
    shared by all of the item's samples. A corpus without enough non-gold
    documents is an error naming the item. Items are processed by a bounded
    worker pool and merged in question-id order, so the output is stable.
    """
    for item in items:
        if not item.legal_refs:
            raise MiningError(f"item {item.id} has no legal refs to mine positives from")

    ordered = sorted(items, key=lambda i: i.id)

    def mine_one(item: QAItem) -> list[TrainingSample]:
        query = build_query(item, QueryStrategy.QA)
        run = search(index, query, backend, k=len(index), question_id=item.id)
        gold = set(item.legal_refs)
        negatives = [d for d in run.doc_ids if d not in gold][:n_negatives]
        if len(negatives) < n_negatives:
            raise MiningError(
                f"item {item.id}: only {len(negatives)} non-gold docs in a corpus of "
                f"{len(index)}, need {n_negatives}"
            )
        return [
            TrainingSample(
                question_id=item.id,
                query=query,
                positive_id=ref,
                negative_ids=tuple(negatives),
            )
            for ref in item.legal_refs
        ]

    samples: list[TrainingSample] = []
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for batch in pool.map(mine_one, ordered):
            samples.extend(batch)
    return samples


# ---------------------------------------------------------------------------
# train/eval partition

def split_question_ids(
    question_ids: Sequence[str], ratio: float = TRAIN_RATIO, seed: int = 42
) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Deterministically partition question ids into train/eval by ratio.

    Ids are deduplicated and shuffled under the seed; the first
    floor(n * ratio) go to train. The same (ids, ratio, seed) always yields
    the same partition regardless of input order.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    unique = sorted(set(question_ids))
    rng = random.Random(seed)
    rng.shuffle(unique)
    cut = int(len(unique) * ratio)
    return tuple(sorted(unique[:cut])), tuple(sorted(unique[cut:]))


def split_train_eval(
    samples: Sequence[TrainingSample], ratio: float = TRAIN_RATIO, seed: int = 42
) -> tuple[list[TrainingSample], list[TrainingSample]]:
    """Partition samples by question id so no question straddles the cut."""
    train_ids, _ = split_question_ids([s.question_id for s in samples], ratio, seed)
    train_set = set(train_ids)
    train = [s for s in samples if s.question_id in train_set]
    evaluation = [s for s in samples if s.question_id not in train_set]
    return train, evaluation


# ---------------------------------------------------------------------------
# synthetic augmentation

# Few-shot generation prompt. Where the answering templates fix the exam
# voice, this one asks for new exam items grounded in the provided articles,
# with two in-context examples and "---" as the separator the parser keys on.
AUGMENT_PROMPT = """Esti un expert in legislatia rutiera din Romania. Vorbesti doar limba romana.
Primesti un set de articole de lege. Scopul tau este sa generezi {n_pairs} grile noi de test auto, fiecare cu variante de raspuns, care pot fi rezolvate folosind articolele primite.

Separa grilele printr-o linie care contine doar trei liniute, astfel:

---

Acestea sunt doua exemple de grile:

---

Intrebare: Ce obligatie are conducatorul auto la apropierea de o trecere de pietoni semnalizata?
Variante:
A) Sa mareasca viteza pentru a elibera trecerea
B) Sa reduca viteza si sa acorde prioritate pietonilor angajati in traversare
C) Sa claxoneze pentru a avertiza pietonii

---

Intrebare: In ce situatie este permisa oprirea pe partea carosabila a unei autostrazi?
Variante:
A) Pentru odihna de scurta durata
B) Doar in caz de forta majora
C) Pentru imbarcarea pasagerilor

---

Genereaza exact {n_pairs} grile noi, separate prin linia de trei liniute.

Acestea sunt articolele de lege:

{documents}"""


def build_augment_prompt(docs: Sequence[tuple[str, str]], n_pairs: int) -> str:
    return AUGMENT_PROMPT.replace("{n_pairs}", str(n_pairs)).replace(
        "{documents}", format_documents(docs)
    )


_SEPARATOR = "---"


def _parse_pair_blocks(text: str) -> list[str]:
    blocks: list[str] = []
    current: list[str] = []
    for line in text.splitlines():
        if line.strip() == _SEPARATOR:
            if current:
                blocks.append("\n".join(current).strip())
                current = []
            continue
        current.append(line)
    if current:
        block = "\n".join(current).strip()
        if block:
            blocks.append(block)
    return [b for b in blocks if b]


def generate_augmented(
    corpus: Corpus,
    backend: ChatBackend,
    model_id: str,
    n_sets: int = AUGMENT_N_SETS,
    set_size_range: tuple[int, int] = AUGMENT_SET_SIZE,
    pairs_per_set: int = AUGMENT_PAIRS_PER_SET,
    seed: int = 42,
    budget: int = 384,
    cache: ResponseCache | None = None,
    temperature: float | None = 0.0,
    **complete_kwargs,
) -> list[AugmentedPair]:
    """Generate synthetic QA pairs over randomly sampled document sets.

    Every emitted pair carries the ids of the articles it was generated
    from. A generation that cannot be split into the expected number of
    blocks marks the missing pairs rejected (reason ``unparseable``) and the
    run continues; the raw count is always ``n_sets * pairs_per_set``.
    """
    lo, hi = set_size_range
    active = sorted(corpus.active_articles(), key=lambda a: a.id)
    if len(active) < hi:
        raise MiningError(
            f"need at least {hi} active articles to sample sets, have {len(active)}"
        )
    texts = {a.id: doc_embedding_text(a, budget) for a in active}
    ids = [a.id for a in active]
    rng = random.Random(seed)

    pairs: list[AugmentedPair] = []
    for set_index in range(n_sets):
        size = rng.randint(lo, hi)
        sampled = tuple(rng.sample(ids, size))
        prompt = build_augment_prompt([(d, texts[d]) for d in sampled], pairs_per_set)
        request = user_request(model_id, prompt, temperature=temperature)
        try:
            response = complete(request, backend, cache=cache, **complete_kwargs)
            blocks = _parse_pair_blocks(response)
        except Exception as exc:  # generation failures must not end the run
            blocks = []
            reason = f"generation-failed: {exc}"
        else:
            reason = "unparseable"
        for pair_index in range(pairs_per_set):
            if pair_index < len(blocks):
                pairs.append(
                    AugmentedPair(
                        text=blocks[pair_index],
                        source_doc_ids=sampled,
                        set_index=set_index,
                        pair_index=pair_index,
                    )
                )
            else:
                pairs.append(
                    AugmentedPair(
                        text="",
                        source_doc_ids=sampled,
                        set_index=set_index,
                        pair_index=pair_index,
                        kept=False,
                        reason=reason,
                    )
                )
    return pairs


def _normalize_for_dedup(text: str) -> str:
    return " ".join(text.lower().split())


def dedup_filter(
    pairs: Sequence[AugmentedPair],
    backend: EmbeddingBackend,
    threshold: float = DEDUP_THRESHOLD,
) -> list[AugmentedPair]:
    """Reject exact duplicates, then near-duplicates above the threshold.

    Exact comparison happens on lowercased, whitespace-collapsed text; the
    survivors are then scanned greedily in input order and a pair is rejected
    when its embedding's cosine against any already-kept pair exceeds the
    threshold. Already-rejected pairs pass through untouched, so the filter
    is idempotent. Returns the kept pairs; rejection flags are set in place.
    """
    candidates = [p for p in pairs if p.kept]

    seen: dict[str, AugmentedPair] = {}
    survivors: list[AugmentedPair] = []
    for pair in candidates:
        key = _normalize_for_dedup(pair.text)
        if key in seen:
            first = seen[key]
            pair.kept = False
            pair.reason = f"exact-duplicate of set {first.set_index} pair {first.pair_index}"
        else:
            seen[key] = pair
            survivors.append(pair)

    kept: list[AugmentedPair] = []
    kept_matrix: np.ndarray | None = None
    for pair in survivors:
        vec = np.asarray(backend.embed([pair.text]), dtype=np.float64)[0]
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec = vec / norm
        if kept_matrix is not None:
            sims = kept_matrix @ vec
            best = int(np.argmax(sims))
            if float(sims[best]) > threshold:
                other = kept[best]
                pair.kept = False
                pair.reason = (
                    f"similarity {float(sims[best]):.4f} to set {other.set_index} "
                    f"pair {other.pair_index} exceeds {threshold}"
                )
                continue
        kept.append(pair)
        row = vec[None, :]
        kept_matrix = row if kept_matrix is None else np.vstack([kept_matrix, row])
    return kept


def augmented_to_samples(
    pairs: Sequence[AugmentedPair],
    index: VectorIndex | None = None,
    backend: EmbeddingBackend | None = None,
    n_negatives: int = N_NEGATIVES,
) -> list[TrainingSample]:
    """Turn kept augmented pairs into training samples.

    Every source document of a pair counts as a positive, mirroring the
    one-sample-per-positive rule for mined questions. With an index and
    backend, negatives are the top-ranked documents outside the pair's own
    source set (best effort: fewer than requested is fine here, since the
    generated sets are arbitrary slices of the corpus); without them the
    samples carry no explicit negatives and the loss falls back to
    in-batch ones.
    """
    samples: list[TrainingSample] = []
    for pair in pairs:
        if not pair.kept:
            continue
        qid = f"aug-{pair.set_index:04d}-{pair.pair_index}"
        negatives: tuple[str, ...] = ()
        if index is not None and backend is not None:
            run = search(index, pair.text, backend, k=len(index.doc_ids), question_id=qid)
            source = set(pair.source_doc_ids)
            picked = [d for d in run.doc_ids if d not in source][:n_negatives]
            negatives = tuple(picked)
        for doc_id in pair.source_doc_ids:
            samples.append(
                TrainingSample(
                    question_id=qid,
                    query=pair.text,
                    positive_id=doc_id,
                    negative_ids=negatives,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# bundle export and training hand-off

def export_training_bundle(
    samples: Sequence[TrainingSample],
    config: TrainConfig,
    doc_texts: Mapping[str, str],
    out_dir: str | Path,
) -> dict:
    """Write ``samples.jsonl`` and ``manifest.json`` for an external trainer.

    Sample lines carry the query and the positive/negative texts (ids kept
    alongside for audit). The manifest freezes the TrainConfig and content
    digests of both the samples and the doc texts; nothing volatile goes in,
    so re-exporting the same inputs is byte-identical.
    """
    if not samples:
        raise BundleError("refusing to export an empty training bundle")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = []
    for s in samples:
        missing = [d for d in (s.positive_id, *s.negative_ids) if d not in doc_texts]
        if missing:
            raise BundleError(f"sample for {s.question_id}: no text for docs {missing}")
        lines.append(
            dumps_record(
                {
                    "question_id": s.question_id,
                    "query": s.query,
                    "positive_id": s.positive_id,
                    "positive": doc_texts[s.positive_id],
                    "negative_ids": list(s.negative_ids),
                    "negatives": [doc_texts[d] for d in s.negative_ids],
                }
            )
        )
    samples_text = "\n".join(lines) + "\n"
    (out_dir / "samples.jsonl").write_text(samples_text, encoding="utf-8")

    corpus_digest = hashlib.sha256(
        json.dumps(sorted(doc_texts.items()), ensure_ascii=False).encode("utf-8")
    ).hexdigest()
    manifest = {
        "config": asdict(config),
        "provenance": {
            "n_samples": len(samples),
            "n_questions": len({s.question_id for s in samples}),
            "samples_digest": hashlib.sha256(samples_text.encode("utf-8")).hexdigest(),
            "corpus_digest": corpus_digest,
        },
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest


def save_samples(samples: Sequence[TrainingSample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        dumps_record(
            {
                "question_id": s.question_id,
                "query": s.query,
                "positive_id": s.positive_id,
                "negative_ids": list(s.negative_ids),
            }
        )
        for s in samples
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_samples(path: str | Path) -> list[TrainingSample]:
    samples = []
    with open(Path(path), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            samples.append(
                TrainingSample(
                    question_id=d["question_id"],
                    query=d["query"],
                    positive_id=d["positive_id"],
                    negative_ids=tuple(d["negative_ids"]),
                )
            )
    return samples


def save_pairs(pairs: Sequence[AugmentedPair], path: str | Path) -> None:
    """Persist generated pairs with their keep/reject state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        dumps_record(
            {
                "text": p.text,
                "source_doc_ids": list(p.source_doc_ids),
                "set_index": p.set_index,
                "pair_index": p.pair_index,
                "kept": p.kept,
                "reason": p.reason,
            }
        )
        for p in pairs
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pairs(path: str | Path) -> list[AugmentedPair]:
    pairs = []
    with open(Path(path), encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            pairs.append(
                AugmentedPair(
                    text=d["text"],
                    source_doc_ids=tuple(d["source_doc_ids"]),
                    set_index=d["set_index"],
                    pair_index=d["pair_index"],
                    kept=d["kept"],
                    reason=d.get("reason"),
                )
            )
    return pairs


class TrainerBackend(Protocol):
    """Consumes an exported bundle, returns a model id it can load back."""

    def train(self, bundle_dir: Path) -> str: ...

    def load(self, model_id: str) -> EmbeddingBackend: ...


def finetune_retriever(
    bundle_dir: str | Path, trainer: TrainerBackend | None
) -> EmbeddingBackend:
    """Run the delegated training step and hand back a usable backend.

    Without a trainer this raises TrainingDelegatedError: the bundle
    directory is the complete hand-off, train it elsewhere and plug the
    resulting model in through the embedding-backend interface.
    """
    bundle_dir = Path(bundle_dir)
    if not (bundle_dir / "manifest.json").exists():
        raise BundleError(f"{bundle_dir} does not contain a bundle manifest")
    if trainer is None:
        raise TrainingDelegatedError(
            f"training delegated: no trainer backend configured, hand off the bundle at "
            f"{bundle_dir} to an external trainer"
        )
    model_id = trainer.train(bundle_dir)
    return trainer.load(model_id)
