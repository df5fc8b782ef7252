"""Concrete embedding and chat backends.

Two families: a fully offline hashing embedder for smoke tests and demos,
and HTTP adapters speaking the common ``/v1/embeddings`` and
``/v1/chat/completions`` wire formats. Credentials come from the
environment only (``LAWRAG_API_KEY``), never from config files or flags.
"""

from __future__ import annotations

import base64
import hashlib
import os
import re
from typing import Sequence

import numpy as np
import requests

from .errors import GenerationRefusedError, TransportError
from .llm import ChatRequest

API_KEY_ENV = "LAWRAG_API_KEY"

_WORD_RE = re.compile(r"\w+")


class HashEmbeddingBackend:
    """Deterministic bag-of-words embedder over hashed token features.

    Tokens are lowercased word characters; each token lands in a dimension
    chosen by its sha256 digest with a +/-1 sign bit, and the sum is
    L2-normalized. No model weights, no network: similarity is plain token
    overlap, which is exactly what offline tests and demos need. Texts with
    no tokens at all embed to a reserved basis vector.
    """

    def __init__(self, dim: int = 256):
        if dim < 2:
            raise ValueError("dim must be at least 2")
        self.dim = dim
        self.model_id = f"hash-bow-{dim}"
        self._token_cache: dict[str, tuple[int, float]] = {}

    def _feature(self, token: str) -> tuple[int, float]:
        hit = self._token_cache.get(token)
        if hit is None:
            digest = hashlib.sha256(token.encode("utf-8")).digest()
            index = int.from_bytes(digest[:4], "big") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            hit = (index, sign)
            self._token_cache[token] = hit
        return hit

    def embed(self, texts: Sequence[str], role: str | None = None) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            tokens = _WORD_RE.findall(text.lower())
            if not tokens:
                out[row, 0] = 1.0
                continue
            for token in tokens:
                index, sign = self._feature(token)
                out[row, index] += sign
            norm = np.linalg.norm(out[row])
            if norm == 0:
                out[row] = 0.0
                out[row, 0] = 1.0
            else:
                out[row] /= norm
        return out


def _auth_headers() -> dict[str, str]:
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(API_KEY_ENV)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


class HttpEmbeddingBackend:
    """Adapter for an HTTP endpoint taking a batch of strings.

    POSTs ``{"model": ..., "input": [...]}`` to ``<base_url>/embeddings`` and
    reads vectors from ``data[i].embedding``. Vectors are re-normalized here;
    the wire format does not promise unit norm. The optional role hint is
    passed through as ``input_type`` for backends that distinguish queries
    from passages.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        timeout: float = 60.0,
        send_role: bool = False,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model
        self.timeout = timeout
        self.send_role = send_role
        self.session = session or requests.Session()

    def embed(self, texts: Sequence[str], role: str | None = None) -> np.ndarray:
        payload: dict = {"model": self.model_id, "input": list(texts)}
        if self.send_role and role:
            payload["input_type"] = role
        try:
            resp = self.session.post(
                f"{self.base_url}/embeddings",
                json=payload,
                headers=_auth_headers(),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"embeddings call failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"embeddings call returned {resp.status_code}: {resp.text[:200]}")
        data = resp.json()["data"]
        matrix = np.asarray([row["embedding"] for row in data], dtype=np.float64)
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return matrix / norms


class HttpChatBackend:
    """Adapter for an HTTP chat-completions endpoint.

    Images travel inline as base64 data URLs. ``temperature``/``seed`` are
    sent only when the request carries them, so reasoning-model configs that
    must omit both simply leave them None. 4xx responses mentioning content
    policy surface as refusals; everything else transient raises
    TransportError and is left to the caller's retry policy.
    """

    def __init__(
        self,
        base_url: str,
        supports_vision: bool = True,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.supports_vision = supports_vision
        self.timeout = timeout
        self.session = session or requests.Session()

    def generate(self, request: ChatRequest) -> str:
        messages = []
        for m in request.messages:
            if m.image is None:
                messages.append({"role": m.role, "content": m.text})
            else:
                encoded = base64.b64encode(m.image).decode("ascii")
                messages.append(
                    {
                        "role": m.role,
                        "content": [
                            {"type": "text", "text": m.text},
                            {
                                "type": "image_url",
                                "image_url": {"url": f"data:{m.image_media_type};base64,{encoded}"},
                            },
                        ],
                    }
                )
        payload: dict = {"model": request.model_id, "messages": messages}
        if request.temperature is not None:
            payload["temperature"] = request.temperature
        if request.seed is not None:
            payload["seed"] = request.seed
        try:
            resp = self.session.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers=_auth_headers(),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"chat call failed: {exc}") from exc
        if resp.status_code != 200:
            body = resp.text[:500]
            if resp.status_code == 400 and "content" in body and "policy" in body:
                raise GenerationRefusedError(f"model refused the request: {body}")
            raise TransportError(f"chat call returned {resp.status_code}: {body}")
        data = resp.json()
        choice = data["choices"][0]
        if choice.get("finish_reason") == "content_filter":
            raise GenerationRefusedError("response withheld by content filter")
        return choice["message"]["content"]


class HttpRerankerBackend:
    """Cross-encoder reranking over an HTTP /rerank endpoint.

    Sends the query with the candidate texts and returns one relevance
    score per document, in input order.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_id = model
        self.timeout = timeout
        self.session = session or requests.Session()

    def score(self, query: str, docs: Sequence[str]) -> list[float]:
        payload = {"model": self.model_id, "query": query, "documents": list(docs)}
        try:
            resp = self.session.post(
                f"{self.base_url}/rerank",
                json=payload,
                headers=_auth_headers(),
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"rerank call failed: {exc}") from exc
        if resp.status_code != 200:
            raise TransportError(f"rerank call returned {resp.status_code}: {resp.text[:500]}")
        data = resp.json()
        scores = [0.0] * len(docs)
        for entry in data["results"]:
            scores[int(entry["index"])] = float(entry["relevance_score"])
        return scores
