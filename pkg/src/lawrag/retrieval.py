"""Dense retrieval: vector index, query strategies, search, and reranking.

Similarity is cosine over unit-normalized embeddings, computed by a
brute-force scan; at corpus scale (hundreds of documents) nothing faster is
warranted. All orderings are fully deterministic: score ties break by
ascending doc id, rerank ties by original rank.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .data import QAItem, format_options
from .errors import IndexBuildError, QueryBuildError, RerankError, SearchError

DEFAULT_K = 10
DEFAULT_RETRIEVE_N = 40

NORM_TOLERANCE = 1e-6


@runtime_checkable
class EmbeddingBackend(Protocol):
    """Maps a batch of texts to unit-norm vectors of a fixed dimension.

    ``role`` is an optional hint ("query" or "passage") for backends whose
    models embed the two sides differently; backends that do not care simply
    ignore it. The same instance must embed the same text to the same vector.
    """

    model_id: str

    def embed(self, texts: Sequence[str], role: str | None = None) -> np.ndarray: ...


class RerankerBackend(Protocol):
    """Scores (query, document text) pairs; higher means more relevant."""

    model_id: str

    def score(self, query: str, docs: Sequence[str]) -> Sequence[float]: ...


class QueryStrategy(enum.Enum):
    Q = "Q"
    QA = "QA"
    QA_RERANK = "QA_RERANK"
    QA_REPHRASED = "QA_REPHRASED"
    CAPTION_QA = "CAPTION_QA"
    REWRITE_IMG_QA = "REWRITE_IMG_QA"
    REWRITE_IMG_CAPTION_QA = "REWRITE_IMG_CAPTION_QA"
    REWRITE_IMG_QA_PLUS_QA = "REWRITE_IMG_QA_PLUS_QA"
    REWRITE_IMG_CAPTION_QA_PLUS_QA = "REWRITE_IMG_CAPTION_QA_PLUS_QA"


# Strategies whose query text is (or starts from) an LLM rewrite.
REWRITE_STRATEGIES = frozenset(
    {
        QueryStrategy.QA_REPHRASED,
        QueryStrategy.REWRITE_IMG_QA,
        QueryStrategy.REWRITE_IMG_CAPTION_QA,
        QueryStrategy.REWRITE_IMG_QA_PLUS_QA,
        QueryStrategy.REWRITE_IMG_CAPTION_QA_PLUS_QA,
    }
)
CAPTION_STRATEGIES = frozenset(
    {
        QueryStrategy.CAPTION_QA,
        QueryStrategy.REWRITE_IMG_CAPTION_QA,
        QueryStrategy.REWRITE_IMG_CAPTION_QA_PLUS_QA,
    }
)


@dataclass(frozen=True)
class VectorIndex:
    doc_ids: tuple[str, ...]
    matrix: np.ndarray  # shape (n_docs, dim), rows unit-norm
    backend_id: str

    def __len__(self) -> int:
        return len(self.doc_ids)

    def digest(self) -> str:
        """Content hash binding ids, vectors, and the embedding model."""
        h = hashlib.sha256()
        h.update(self.backend_id.encode("utf-8"))
        h.update(json.dumps(self.doc_ids).encode("utf-8"))
        h.update(np.ascontiguousarray(self.matrix, dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class RetrievalRun:
    """One ranked result list; scores non-increasing, ids distinct."""

    question_id: str
    query_text: str
    ranked: tuple[tuple[str, float], ...]
    strategy: QueryStrategy | None = None
    k: int = DEFAULT_K

    def __post_init__(self):
        ids = [d for d, _ in self.ranked]
        if len(set(ids)) != len(ids):
            raise ValueError(f"run for {self.question_id!r} has duplicate doc ids")
        scores = [s for _, s in self.ranked]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError(f"run for {self.question_id!r} has increasing scores")

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.ranked)


def build_index(
    docs: Sequence[tuple[str, str]],
    backend: EmbeddingBackend,
    role: str | None = "passage",
    batch_size: int = 64,
) -> VectorIndex:
    """Embed (doc_id, text) pairs into a searchable index.

    Ids must be distinct and the collection non-empty. Backend failures are
    re-raised with the ids of the failing batch so the offending document can
    be found.
    """
    if not docs:
        raise IndexBuildError("cannot build an index from zero documents")
    ids = [d for d, _ in docs]
    if len(set(ids)) != len(ids):
        dupes = sorted({d for d in ids if ids.count(d) > 1})
        raise IndexBuildError(f"duplicate doc ids in index input: {dupes}")

    rows: list[np.ndarray] = []
    for start in range(0, len(docs), batch_size):
        batch = docs[start : start + batch_size]
        try:
            vecs = np.asarray(backend.embed([t for _, t in batch], role=role), dtype=np.float64)
        except Exception as exc:
            span = f"{batch[0][0]}..{batch[-1][0]}"
            raise IndexBuildError(f"embedding failed for docs {span}: {exc}") from exc
        if vecs.ndim != 2 or vecs.shape[0] != len(batch):
            raise IndexBuildError(
                f"backend returned shape {vecs.shape} for a batch of {len(batch)} texts"
            )
        rows.append(vecs)
    matrix = np.vstack(rows)

    norms = np.linalg.norm(matrix, axis=1)
    if np.any(norms == 0):
        zero = [ids[i] for i in np.nonzero(norms == 0)[0]]
        raise IndexBuildError(f"zero-norm embedding for docs {zero}")
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        matrix = matrix / norms[:, None]
    return VectorIndex(doc_ids=tuple(ids), matrix=matrix, backend_id=backend.model_id)


def save_index(index: VectorIndex, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        doc_ids=np.asarray(index.doc_ids, dtype=np.str_),
        matrix=index.matrix,
        backend_id=np.asarray(index.backend_id, dtype=np.str_),
    )


def load_index(path: str | Path) -> VectorIndex:
    with np.load(Path(path), allow_pickle=False) as data:
        return VectorIndex(
            doc_ids=tuple(str(d) for d in data["doc_ids"]),
            matrix=np.asarray(data["matrix"], dtype=np.float64),
            backend_id=str(data["backend_id"]),
        )


def search(
    index: VectorIndex,
    query_text: str,
    backend: EmbeddingBackend,
    k: int = DEFAULT_K,
    question_id: str = "",
    strategy: QueryStrategy | None = None,
) -> RetrievalRun:
    """Top-k cosine search; ties break by ascending doc id.

    Asking for more documents than the index holds returns the full ranking.
    """
    if len(index) == 0:
        raise SearchError("search issued against an empty index")
    if k < 1:
        raise SearchError(f"k must be >= 1, got {k}")
    if backend.model_id != index.backend_id:
        raise SearchError(
            f"index was built with backend {index.backend_id!r}, "
            f"queried with {backend.model_id!r}"
        )
    qvec = np.asarray(backend.embed([query_text], role="query"), dtype=np.float64)[0]
    norm = np.linalg.norm(qvec)
    if norm == 0:
        raise SearchError("query embedded to a zero vector")
    qvec = qvec / norm
    scores = index.matrix @ qvec

    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.doc_ids[i]))
    top = order[: min(k, len(index))]
    ranked = tuple((index.doc_ids[i], float(scores[i])) for i in top)
    return RetrievalRun(
        question_id=question_id, query_text=query_text, ranked=ranked, strategy=strategy, k=k
    )


def build_query(
    item: QAItem,
    strategy: QueryStrategy,
    caption: str | None = None,
    rewritten: str | None = None,
) -> str:
    """Compose the retrieval query text for an item under a strategy.

    Q is the bare question; QA appends the answer options as ``letter) text``
    lines; CAPTION_QA puts the image caption first. Rewrite strategies take
    the LLM rewrite as the query, and the ``_PLUS_QA`` forms append the QA
    block after it. Missing required extras raise an error naming the
    strategy.
    """
    qa_block = item.question + "\n" + format_options(item.options)

    if strategy is QueryStrategy.Q:
        return item.question
    if strategy in (QueryStrategy.QA, QueryStrategy.QA_RERANK):
        return qa_block
    if strategy is QueryStrategy.CAPTION_QA:
        if caption is None:
            raise QueryBuildError(f"strategy {strategy.value} needs a caption for {item.id}")
        return caption + "\n" + qa_block
    if strategy in REWRITE_STRATEGIES:
        if rewritten is None:
            raise QueryBuildError(
                f"strategy {strategy.value} needs a rewritten query for {item.id}"
            )
        if strategy in (
            QueryStrategy.REWRITE_IMG_QA_PLUS_QA,
            QueryStrategy.REWRITE_IMG_CAPTION_QA_PLUS_QA,
        ):
            return rewritten + "\n" + qa_block
        return rewritten
    raise QueryBuildError(f"unhandled strategy {strategy!r}")


def rerank(
    candidates: RetrievalRun,
    query_text: str,
    reranker: RerankerBackend,
    doc_texts: Mapping[str, str],
    keep: int = DEFAULT_K,
) -> RetrievalRun:
    """Reorder a candidate run by reranker score, keeping the best ``keep``.

    Ties keep the original retrieval order. The output never contains a doc
    that was not among the candidates. Reranker failures carry the candidate
    run so callers can fall back or log it.
    """
    ids = candidates.doc_ids
    try:
        texts = [doc_texts[d] for d in ids]
    except KeyError as exc:
        raise RerankError(f"no text for candidate doc {exc.args[0]!r}", candidates) from exc
    try:
        scores = list(reranker.score(query_text, texts))
    except RerankError:
        raise
    except Exception as exc:
        raise RerankError(f"reranker {reranker.model_id} failed: {exc}", candidates) from exc
    if len(scores) != len(ids):
        raise RerankError(
            f"reranker returned {len(scores)} scores for {len(ids)} candidates", candidates
        )

    # sorted() is stable, so equal scores preserve original candidate rank.
    order = sorted(range(len(ids)), key=lambda i: -float(scores[i]))
    top = order[: min(keep, len(ids))]
    ranked = tuple((ids[i], float(scores[i])) for i in top)
    return RetrievalRun(
        question_id=candidates.question_id,
        query_text=query_text,
        ranked=ranked,
        strategy=candidates.strategy,
        k=keep,
    )


# ---------------------------------------------------------------------------
# run files

def write_run_file(runs: Sequence[RetrievalRun], path: str | Path) -> None:
    """Persist runs as ``question_id doc_id rank score strategy`` lines.

    Lines are sorted by (question_id, rank) and scores use a fixed 6-decimal
    format, so rewriting the same runs is byte-identical.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for run in sorted(runs, key=lambda r: r.question_id):
        strategy = run.strategy.value if run.strategy else "-"
        for rank, (doc_id, score) in enumerate(run.ranked, start=1):
            lines.append(f"{run.question_id} {doc_id} {rank} {score:.6f} {strategy}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_run_file(path: str | Path) -> list[RetrievalRun]:
    """Inverse of write_run_file; groups lines back into runs."""
    grouped: dict[str, list[tuple[int, str, float, str]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        qid, doc_id, rank, score, strategy = parts
        grouped.setdefault(qid, []).append((int(rank), doc_id, float(score), strategy))
    runs = []
    for qid in sorted(grouped):
        entries = sorted(grouped[qid])
        strategy = entries[0][3]
        runs.append(
            RetrievalRun(
                question_id=qid,
                query_text="",
                ranked=tuple((doc_id, score) for _, doc_id, score, _ in entries),
                strategy=None if strategy == "-" else QueryStrategy(strategy),
                k=len(entries),
            )
        )
    return runs


# ---------------------------------------------------------------------------
# embedding cache

def _safe_dirname(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name) or "_"


class CachedEmbeddingBackend:
    """Disk cache in front of an embedding backend.

    Vectors are stored one file per (model, role, text) key under the cache
    directory; writes go through a temp file and an atomic replace, so
    concurrent writers of the same key are idempotent.
    """

    def __init__(self, inner: EmbeddingBackend, cache_dir: str | Path):
        self.inner = inner
        self.model_id = inner.model_id
        self.cache_dir = Path(cache_dir) / "emb" / _safe_dirname(inner.model_id)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _key_path(self, text: str, role: str | None) -> Path:
        digest = hashlib.sha256(((role or "") + "\x00" + text).encode("utf-8")).hexdigest()
        return self.cache_dir / f"{digest}.npy"

    def embed(self, texts: Sequence[str], role: str | None = None) -> np.ndarray:
        paths = [self._key_path(t, role) for t in texts]
        vecs: list[np.ndarray | None] = []
        for p in paths:
            vecs.append(np.load(p) if p.exists() else None)
        missing = [i for i, v in enumerate(vecs) if v is None]
        if missing:
            fresh = np.asarray(self.inner.embed([texts[i] for i in missing], role=role))
            for j, i in enumerate(missing):
                vecs[i] = fresh[j]
                self._store(paths[i], fresh[j])
        return np.vstack([v[None, :] for v in vecs])  # type: ignore[index]

    def _store(self, path: Path, vec: np.ndarray) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.cache_dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                np.save(fh, vec)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
