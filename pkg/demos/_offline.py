"""Offline stand-ins shared by the demo scripts.

Every demo runs without a network or an API key: embeddings come from the
deterministic hash backend and chat completions from the small doubles
below, which recognize the three prompt kinds the pipelines send (caption,
query rewrite, question answering) by their content.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

DATA_DIR = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "smoke"

_CAPTION_WORDS = (
    "imagine cu un drum public, un vehicul care se apropie de o intersectie "
    "semnalizata si indicatoare rutiere vizibile "
)


def fixed_caption() -> str:
    # 60 words, inside the 50-100 word target band captions are checked for
    words = (_CAPTION_WORDS * 4).split()
    return " ".join(words[:60])


class GoldAnswerChat:
    """Chat double that answers every question with its gold letters.

    Useful for demonstrating pipelines end to end: with answers pinned to
    the annotation, the answer metrics read 1.0 and everything left to
    observe is retrieval quality, prompt construction, and bookkeeping.
    """

    supports_vision = True

    def __init__(self, items):
        self.items = list(items)

    def generate(self, request) -> str:
        prompt = request.messages[-1].text
        if prompt.startswith("Descrie urmatoare imagine"):
            return fixed_caption()
        if "Raspuns final:" in prompt:
            item = self._item_for(prompt)
            return f"Raspuns final: {item.question} reformulata pentru cautare"
        item = self._item_for(prompt)
        letters = ",".join(sorted(item.correct))
        return (
            "1. Citesc intrebarea si variantele.\n"
            "2. Aleg varianta sustinuta de lege.\n"
            f"Raspuns corect: {letters}"
        )

    def _item_for(self, prompt: str):
        for item in self.items:
            if item.question in prompt:
                return item
        raise AssertionError(f"no known question in prompt:\n{prompt[:200]}")


class SyntheticPairChat:
    """Chat double for the augmentation prompt: emits distinct QA blocks.

    Pair texts are derived from the prompt digest, so every document set
    yields unique, reproducible pairs and the near-duplicate filter has
    real work to do only when the caller makes it so.
    """

    supports_vision = False

    def __init__(self, pairs_per_set: int):
        self.pairs_per_set = pairs_per_set

    def generate(self, request) -> str:
        tag = hashlib.sha256(request.messages[-1].text.encode("utf-8")).hexdigest()[:6]
        blocks = [
            (
                f"Intrebare: ce prevede regula {tag}-{i} privind circulatia?\n"
                f"Raspuns: conform articolelor citate, varianta {tag}-{i} se aplica."
            )
            for i in range(self.pairs_per_set)
        ]
        return "\n---\n".join(blocks)


class TokenOverlapReranker:
    """Scores each candidate by how many query tokens it shares."""

    model_id = "token-overlap"

    def score(self, query: str, docs) -> list[float]:
        q = set(query.lower().split())
        return [float(len(q & set(d.lower().split()))) for d in docs]
