"""Corpus and question-set loading, validation, and serialization.

The on-disk layout is a directory of line-delimited JSON files
(``articles.jsonl``, ``signs.jsonl``, ``questions.jsonl``) plus an
``images/`` subdirectory; field names are documented in SCHEMA.md at the
repository root. Loaded structures are frozen dataclasses and are safe to
share between threads.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .errors import EmbeddingTextError, ValidationError

ARTICLE_SOURCES = (
    "traffic_regulation",
    "road_code",
    "penal_code",
    "technical_inspection",
    "civil_liability",
)

# Human-readable labels used when composing embedding text and prompt blocks.
SOURCE_LABELS = {
    "traffic_regulation": "Traffic Regulation",
    "road_code": "Road Code",
    "penal_code": "Penal Code",
    "technical_inspection": "Technical Inspection",
    "civil_liability": "Civil Liability",
}

SPLITS = ("s1", "s2", "s3", "s4")
SECONDARY_CATEGORIES = ("pov", "aerial", "misc")

# Splits whose items must carry legal references / an image reference.
LAW_SPLITS = frozenset({"s1", "s3"})
IMAGE_SPLITS = frozenset({"s3", "s4"})

DEFAULT_TOKEN_BUDGET = 384


@dataclass(frozen=True)
class LegalArticle:
    id: str
    source: str
    article_number: str
    title: str
    body: str
    abrogated: bool = False


@dataclass(frozen=True)
class TrafficSign:
    id: str
    name: str
    category: str
    explanation: str = ""


@dataclass(frozen=True)
class QAItem:
    id: str
    question: str
    options: Mapping[str, str]
    correct: frozenset[str]
    split: str
    category: str
    explanation: str = ""
    legal_refs: tuple[str, ...] = ()
    indicator_refs: tuple[str, ...] = ()
    image_ref: str | None = None
    secondary_category: str | None = None

    @property
    def letters(self) -> tuple[str, ...]:
        """Option letters in order (contiguous from A by validation)."""
        return tuple(sorted(self.options))


@dataclass(frozen=True)
class Corpus:
    """Immutable snapshot of the document side of the dataset."""

    articles: tuple[LegalArticle, ...]
    signs: tuple[TrafficSign, ...]

    def article_by_id(self, doc_id: str) -> LegalArticle:
        return self._article_map[doc_id]

    def sign_by_id(self, sign_id: str) -> TrafficSign:
        return self._sign_map[sign_id]

    @property
    def _article_map(self) -> dict[str, LegalArticle]:
        cached = self.__dict__.get("_article_map_cache")
        if cached is None:
            cached = {a.id: a for a in self.articles}
            object.__setattr__(self, "_article_map_cache", cached)
        return cached

    @property
    def _sign_map(self) -> dict[str, TrafficSign]:
        cached = self.__dict__.get("_sign_map_cache")
        if cached is None:
            cached = {s.id: s for s in self.signs}
            object.__setattr__(self, "_sign_map_cache", cached)
        return cached

    def has_article(self, doc_id: str) -> bool:
        return doc_id in self._article_map

    def has_sign(self, sign_id: str) -> bool:
        return sign_id in self._sign_map

    def active_articles(self) -> tuple[LegalArticle, ...]:
        return tuple(a for a in self.articles if not a.abrogated)

    def source_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in ARTICLE_SOURCES}
        for a in self.articles:
            counts[a.source] += 1
        return counts


# ---------------------------------------------------------------------------
# token proxy

_TOKEN_RE = re.compile(r"\S+")


def whitespace_token_count(text: str) -> int:
    """Default token proxy: count of whitespace-delimited words."""
    return len(_TOKEN_RE.findall(text))


# ---------------------------------------------------------------------------
# record parsing

def _require(record: dict, key: str, where: str):
    if key not in record:
        raise ValidationError("missing-field", f"{where}: missing required field {key!r}")
    return record[key]


def _read_jsonl(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(
                    "malformed-record", f"{path}:{lineno}: not valid JSON ({exc.msg})"
                ) from exc
            if not isinstance(record, dict):
                raise ValidationError(
                    "malformed-record", f"{path}:{lineno}: expected an object"
                )
            yield lineno, record


def article_from_dict(record: dict, where: str = "article") -> LegalArticle:
    source = _require(record, "source", where)
    if source not in ARTICLE_SOURCES:
        raise ValidationError(
            "unknown-source",
            f"{where}: unknown source {source!r}, expected one of {ARTICLE_SOURCES}",
        )
    art = LegalArticle(
        id=str(_require(record, "id", where)),
        source=source,
        article_number=str(_require(record, "article_number", where)),
        title=str(_require(record, "title", where)),
        body=str(_require(record, "body", where)),
        abrogated=bool(record.get("abrogated", False)),
    )
    if not art.id:
        raise ValidationError("empty-id", f"{where}: id must be non-empty")
    if not art.body and not art.abrogated:
        raise ValidationError(
            "empty-body", f"{where}: article {art.id} has an empty body but is not abrogated"
        )
    return art


def sign_from_dict(record: dict, where: str = "sign") -> TrafficSign:
    sign = TrafficSign(
        id=str(_require(record, "id", where)),
        name=str(_require(record, "name", where)),
        category=str(_require(record, "category", where)),
        explanation=str(record.get("explanation", "")),
    )
    if not sign.id:
        raise ValidationError("empty-id", f"{where}: id must be non-empty")
    if not sign.name or not sign.category:
        raise ValidationError(
            "empty-sign-field", f"{where}: sign {sign.id} needs a non-empty name and category"
        )
    return sign


def qa_item_from_dict(record: dict, where: str = "question") -> QAItem:
    item_id = str(_require(record, "id", where))
    where = f"{where} {item_id}"
    split = _require(record, "split", where)
    if split not in SPLITS:
        raise ValidationError("unknown-split", f"{where}: unknown split {split!r}")

    raw_options = _require(record, "options", where)
    if not isinstance(raw_options, dict) or len(raw_options) < 2:
        raise ValidationError(
            "bad-options", f"{where}: options must be a letter->text map with at least 2 entries"
        )
    letters = sorted(raw_options)
    expected = list(string.ascii_uppercase[: len(letters)])
    if letters != expected:
        raise ValidationError(
            "bad-options",
            f"{where}: option letters {letters} must be contiguous from A (expected {expected})",
        )
    options = {k: str(v) for k, v in sorted(raw_options.items())}

    correct = frozenset(str(c) for c in _require(record, "correct", where))
    if not correct:
        raise ValidationError("empty-gold", f"{where}: correct answer set is empty")
    stray = sorted(correct - set(letters))
    if stray:
        raise ValidationError(
            "correct-letter-mismatch",
            f"{where}: correct letters {stray} are not among the options {letters}",
        )

    legal_refs = tuple(str(r) for r in record.get("legal_refs", []))
    indicator_refs = tuple(str(r) for r in record.get("indicator_refs", []))
    image_ref = record.get("image_ref")
    secondary = record.get("secondary_category")

    if split in LAW_SPLITS and not legal_refs:
        raise ValidationError(
            "missing-legal-refs", f"{where}: split {split} requires non-empty legal_refs"
        )
    if split not in LAW_SPLITS and legal_refs:
        raise ValidationError(
            "unexpected-legal-refs", f"{where}: split {split} must not carry legal_refs"
        )
    if split in IMAGE_SPLITS and not image_ref:
        raise ValidationError(
            "missing-image", f"{where}: split {split} requires an image_ref"
        )
    if split not in IMAGE_SPLITS and image_ref:
        raise ValidationError(
            "unexpected-image", f"{where}: split {split} must not carry an image_ref"
        )
    if secondary is not None:
        if secondary not in SECONDARY_CATEGORIES:
            raise ValidationError(
                "unknown-secondary-category",
                f"{where}: unknown secondary_category {secondary!r}",
            )
        if not image_ref:
            raise ValidationError(
                "secondary-without-image",
                f"{where}: secondary_category is only valid for image questions",
            )

    return QAItem(
        id=item_id,
        question=str(_require(record, "question", where)),
        options=options,
        correct=correct,
        split=split,
        category=str(_require(record, "category", where)),
        explanation=str(record.get("explanation", "")),
        legal_refs=legal_refs,
        indicator_refs=indicator_refs,
        image_ref=str(image_ref) if image_ref else None,
        secondary_category=secondary,
    )


# ---------------------------------------------------------------------------
# serialization (canonical form: sorted keys, defaults omitted)

def article_to_dict(article: LegalArticle) -> dict:
    out = {
        "id": article.id,
        "source": article.source,
        "article_number": article.article_number,
        "title": article.title,
        "body": article.body,
    }
    if article.abrogated:
        out["abrogated"] = True
    return out


def sign_to_dict(sign: TrafficSign) -> dict:
    out = {"id": sign.id, "name": sign.name, "category": sign.category}
    if sign.explanation:
        out["explanation"] = sign.explanation
    return out


def qa_item_to_dict(item: QAItem) -> dict:
    out: dict = {
        "id": item.id,
        "question": item.question,
        "options": {k: item.options[k] for k in sorted(item.options)},
        "correct": sorted(item.correct),
        "split": item.split,
        "category": item.category,
    }
    if item.explanation:
        out["explanation"] = item.explanation
    if item.legal_refs:
        out["legal_refs"] = list(item.legal_refs)
    if item.indicator_refs:
        out["indicator_refs"] = list(item.indicator_refs)
    if item.image_ref:
        out["image_ref"] = item.image_ref
    if item.secondary_category:
        out["secondary_category"] = item.secondary_category
    return out


def dumps_record(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def _write_jsonl(records: Iterable[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(dumps_record(record) + "\n")


# ---------------------------------------------------------------------------
# loading

def load_corpus(path: str | Path) -> Corpus:
    """Load articles (and signs, if present) from a directory or a file.

    A directory is expected to contain ``articles.jsonl`` and optionally
    ``signs.jsonl``; a file path is read as an articles file. Duplicate ids
    within either collection are a validation error naming both records.
    """
    path = Path(path)
    if path.is_dir():
        articles_path = path / "articles.jsonl"
        signs_path = path / "signs.jsonl"
    else:
        articles_path = path
        signs_path = None

    articles: list[LegalArticle] = []
    seen: dict[str, int] = {}
    for lineno, record in _read_jsonl(articles_path):
        art = article_from_dict(record, where=f"{articles_path}:{lineno}")
        if art.id in seen:
            raise ValidationError(
                "duplicate-id",
                f"{articles_path}:{lineno}: article id {art.id!r} already used at line {seen[art.id]}",
            )
        seen[art.id] = lineno
        articles.append(art)

    signs: list[TrafficSign] = []
    if signs_path is not None and signs_path.exists():
        seen_signs: dict[str, int] = {}
        for lineno, record in _read_jsonl(signs_path):
            sign = sign_from_dict(record, where=f"{signs_path}:{lineno}")
            if sign.id in seen_signs:
                raise ValidationError(
                    "duplicate-id",
                    f"{signs_path}:{lineno}: sign id {sign.id!r} already used at line {seen_signs[sign.id]}",
                )
            seen_signs[sign.id] = lineno
            signs.append(sign)

    return Corpus(articles=tuple(articles), signs=tuple(signs))


def load_qa(
    path: str | Path,
    split: str | Sequence[str] | None = None,
    corpus: Corpus | None = None,
) -> list[QAItem]:
    """Load question items, optionally filtering by split.

    When ``corpus`` is given, every legal and indicator reference is checked
    against it; a reference to a missing document is a ``dangling-ref``
    validation error. Filtering never silently drops invalid records: each
    record is validated before the split filter applies.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "questions.jsonl"
    wanted = None
    if split is not None:
        wanted = {split} if isinstance(split, str) else set(split)
        unknown = wanted - set(SPLITS)
        if unknown:
            raise ValidationError("unknown-split", f"unknown split filter {sorted(unknown)}")

    items: list[QAItem] = []
    seen: dict[str, int] = {}
    for lineno, record in _read_jsonl(path):
        item = qa_item_from_dict(record, where=f"{path}:{lineno}")
        if item.id in seen:
            raise ValidationError(
                "duplicate-id",
                f"{path}:{lineno}: question id {item.id!r} already used at line {seen[item.id]}",
            )
        seen[item.id] = lineno
        if corpus is not None:
            for ref in item.legal_refs:
                if not corpus.has_article(ref):
                    raise ValidationError(
                        "dangling-ref",
                        f"{path}:{lineno}: question {item.id} references unknown article {ref!r}",
                    )
            for ref in item.indicator_refs:
                if not corpus.has_sign(ref):
                    raise ValidationError(
                        "dangling-ref",
                        f"{path}:{lineno}: question {item.id} references unknown sign {ref!r}",
                    )
        if wanted is None or item.split in wanted:
            items.append(item)
    return items


def save_corpus(corpus: Corpus, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    _write_jsonl((article_to_dict(a) for a in corpus.articles), out_dir / "articles.jsonl")
    _write_jsonl((sign_to_dict(s) for s in corpus.signs), out_dir / "signs.jsonl")


def save_qa(items: Sequence[QAItem], path: str | Path) -> None:
    path = Path(path)
    if path.is_dir():
        path = path / "questions.jsonl"
    _write_jsonl((qa_item_to_dict(i) for i in items), path)


# ---------------------------------------------------------------------------
# embedding text

def article_title_metadata(article: LegalArticle) -> str:
    """Header line prepended to the body for embedding, never truncated."""
    label = SOURCE_LABELS[article.source]
    return f"{label} {article.article_number}: {article.title}"


def doc_embedding_text(
    article: LegalArticle,
    budget: int = DEFAULT_TOKEN_BUDGET,
    count_tokens: Callable[[str], int] = whitespace_token_count,
) -> str:
    """Compose the text a document is embedded under.

    Title metadata comes first, separated from the body by a blank line; only
    the body is truncated, at a word boundary, so the combined text stays
    within ``budget`` proxy tokens. The body prefix is preserved byte for
    byte. A title that alone exceeds the budget is an error.
    """
    head = article_title_metadata(article)
    head_count = count_tokens(head)
    if head_count > budget:
        raise EmbeddingTextError(
            f"article {article.id}: title metadata is {head_count} tokens, over budget {budget}"
        )
    body = article.body
    if not body:
        return head
    full = head + "\n\n" + body
    if count_tokens(full) <= budget:
        return full

    # Binary search the longest body prefix, cut at word ends, that fits.
    ends = [m.end() for m in _TOKEN_RE.finditer(body)]
    lo, hi = 0, len(ends)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count_tokens(head + "\n\n" + body[: ends[mid - 1]]) <= budget:
            lo = mid
        else:
            hi = mid - 1
    if lo == 0:
        return head
    return head + "\n\n" + body[: ends[lo - 1]]


def sign_embedding_text(sign: TrafficSign, include_explanation: bool = False) -> str:
    """Compose the text a traffic sign is embedded under.

    The base form is name plus category; with ``include_explanation`` the
    explanation is appended after a newline, so the base form is always a
    strict prefix of the extended form.
    """
    base = f"{sign.name} ({sign.category})"
    if not include_explanation or not sign.explanation:
        return base
    return base + "\n" + sign.explanation


def format_options(options: Mapping[str, str]) -> str:
    """Render answer options as one ``letter) text`` line each."""
    return "\n".join(f"{letter}) {options[letter]}" for letter in sorted(options))


# ---------------------------------------------------------------------------
# stats

@dataclass(frozen=True)
class CorpusStats:
    source_counts: dict[str, int]
    sign_count: int
    token_lengths: dict[str, int]
    histogram: tuple[tuple[int, int, int], ...]  # (lo, hi_exclusive, count)
    bucket_width: int

    def fraction_under(self, threshold: int) -> float:
        if not self.token_lengths:
            return 0.0
        under = sum(1 for n in self.token_lengths.values() if n < threshold)
        return under / len(self.token_lengths)


def corpus_stats(
    corpus: Corpus,
    count_tokens: Callable[[str], int] = whitespace_token_count,
    bucket_width: int = 100,
) -> CorpusStats:
    """Per-source counts and the token-length distribution of all articles.

    Lengths are measured on the untruncated embedding text (title metadata
    plus body) under the same token proxy used for budget enforcement.
    """
    def full_text(a: LegalArticle) -> str:
        head = article_title_metadata(a)
        return head + "\n\n" + a.body if a.body else head

    lengths = {a.id: count_tokens(full_text(a)) for a in corpus.articles}
    buckets: list[tuple[int, int, int]] = []
    if lengths:
        top = max(lengths.values())
        edge = 0
        while edge <= top:
            count = sum(1 for n in lengths.values() if edge <= n < edge + bucket_width)
            buckets.append((edge, edge + bucket_width, count))
            edge += bucket_width
    return CorpusStats(
        source_counts=corpus.source_counts(),
        sign_count=len(corpus.signs),
        token_lengths=lengths,
        histogram=tuple(buckets),
        bucket_width=bucket_width,
    )
