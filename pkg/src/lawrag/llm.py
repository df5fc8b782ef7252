"""Prompt templates, chat orchestration, and answer parsing.

The prompt pack targets Romanian-language driving-law exams and is stored
verbatim; placeholders use ``{name}`` syntax and every template that asks for
a final answer fixes the machine-readable contract ``Raspuns corect: A,B``
(rewrites use ``Raspuns final:``). Rendering substitutes exactly the declared
placeholders: an unbound placeholder is an error, an unused binding only a
warning.

Chat calls are cached content-addressed on (model, messages, image digests,
temperature, seed) and retried with exponential backoff on transport
failures; a refusal is permanent and not retried.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import time
import unicodedata
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .data import QAItem, format_options
from .errors import (
    GenerationRefusedError,
    RenderError,
    RewriteError,
    TransportError,
)

logger = logging.getLogger(__name__)

ANSWER_MARKER = "Raspuns corect:"
REWRITE_MARKER = "Raspuns final:"
PROMPT_SENTINEL = "==================="

CAPTION_MIN_WORDS = 50
CAPTION_MAX_WORDS = 100


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    text: str

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(re.findall(r"\{(\w+)\}", self.text))


_VIR_REPHRASE = """Esti un politist rutier. Vorbesti doar Limba romana.
Primesti o grila de la un test auto, alaturi de raspunsurile posibile.
Scopul tau este sa generezi o singura intrebare astfel incat sa poti cauta legile care fac referinta la intrebarea primita.

Raspunsul tau se va incheia cu:

"Raspuns final: [intrebare generata tip string]"

Aceasta este intrebarea:

{question}

Aceastea sunt variantele de raspuns:

{answers}

==================="""

_QA_RAG = """Esti un politist rutier. Vorbesti doar Limba romana.
Trebuie sa rezolvi o grila de la un test auto. Aceasta grila poate avea unul sau mai multe raspunsuri corecte.
Gandestete care e raspunsul corect si raspunde la intrebare. La final, ultima parte din raspuns trebuie sa fie litera sau literele corecte.
De exemplu, raspunsul tau se va incheia cu

"Raspuns corect: A"

sau

"Raspuns corect: A,B"

Acesta este modul in care trebuie sa gandesti:

1. Citeste atent intrebare si variantele de raspuns.

2. Identifica ce informatii din legislatie ar putea fi relevante. (Legislatia Romaniei)

3. Daca ai mai multe raspunsuri corecte, argumenteaza fiecare alegere.

Aceasta este intrebarea:

{question}

Aceastea sunt variantele de raspuns:

{answers}

Aceastea sunt legile relevante, dar nu neaparat toate sunt relevante:

{documents}

==================="""

_QA_NORAG = """Esti un politist rutier. Vorbesti doar Limba romana.
Trebuie sa rezolvi o grila de la un test auto. Aceasta grila poate avea unul sau mai multe raspunsuri corecte.
Gandestete care e raspunsul corect si raspunde la intrebare. La final, ultima parte din raspuns trebuie sa fie litera sau literele corecte.
De exemplu, raspunsul tau se va incheia cu

"Raspuns corect: A"

sau

"Raspuns corect: A,B"

Acesta este modul in care trebuie sa gandesti:

1. Citeste atent intrebare si variantele de raspuns.

2. Identifica ce informatii din legislatie ar putea fi relevante. (Legislatia Romaniei)

3. Daca ai mai multe raspunsuri corecte, argumenteaza fiecare alegere.

Aceasta este intrebarea:

{question}

Aceastea sunt variantele de raspuns:

{answers}

==================="""

_QA_RAG_BETTER = """Esti un politist rutier. Vorbesti doar in limba romana.
Trebuie sa rezolvi o grila de la un test auto. Grila poate avea unul sau mai multe raspunsuri corecte. Vei folosi strict legile din Romania.

Gandeste logic, dar nu extrapola peste informatiile oferite. Judeca doar momentul descris, nu presupune alte situatii.

Reguli de gandire:

1. Citeste cu maxima atentie intrebarea si variantele de raspuns.

2. Identifica strict ce prevederi din legislatia rutiera din Romania se aplica situatiei date.

3. Daca raspunsul pare "mai sigur" dar este contrar legislatiei, urmeaza legea, nu instinctul de precautie.

4. Alege DOAR raspunsurile care sunt complet corecte conform textului legii --- nu ghici, nu completa informatii lipsa.

5. Daca un raspuns corect este mai bun decat altul dat ca si corect, include mai multe situatii specifice sau exceptii, atunci trebuie ales doar acela.

6. Argumenteaza clar de ce ai ales fiecare raspuns corect. Daca exista mai multe raspunsuri corecte, explica fiecare alegere separat.

7. Fii atent la mici detalii care pot schimba sensul intrebarii sau al raspunsurilor (exista intrebari-capcana).

La final, ultima parte din raspuns trebuie sa fie litera sau literele corecte.
De exemplu, raspunsul tau se va incheia cu:

"Raspuns corect: A"

sau

"Raspuns corect: A,B"

Aceasta este intrebarea:

{question}

Acestea sunt variantele de raspuns:

{answers}

Aceastea sunt legile relevante, dar nu neaparat toate sunt relevante:

{documents}

==================="""

# The documents-free variant of the enhanced prompt: identical wording with
# the relevant-laws section removed.
_QA_NORAG_BETTER = """Esti un politist rutier. Vorbesti doar in limba romana.
Trebuie sa rezolvi o grila de la un test auto. Grila poate avea unul sau mai multe raspunsuri corecte. Vei folosi strict legile din Romania.

Gandeste logic, dar nu extrapola peste informatiile oferite. Judeca doar momentul descris, nu presupune alte situatii.

Reguli de gandire:

1. Citeste cu maxima atentie intrebarea si variantele de raspuns.

2. Identifica strict ce prevederi din legislatia rutiera din Romania se aplica situatiei date.

3. Daca raspunsul pare "mai sigur" dar este contrar legislatiei, urmeaza legea, nu instinctul de precautie.

4. Alege DOAR raspunsurile care sunt complet corecte conform textului legii --- nu ghici, nu completa informatii lipsa.

5. Daca un raspuns corect este mai bun decat altul dat ca si corect, include mai multe situatii specifice sau exceptii, atunci trebuie ales doar acela.

6. Argumenteaza clar de ce ai ales fiecare raspuns corect. Daca exista mai multe raspunsuri corecte, explica fiecare alegere separat.

7. Fii atent la mici detalii care pot schimba sensul intrebarii sau al raspunsurilor (exista intrebari-capcana).

La final, ultima parte din raspuns trebuie sa fie litera sau literele corecte.
De exemplu, raspunsul tau se va incheia cu:

"Raspuns corect: A"

sau

"Raspuns corect: A,B"

Aceasta este intrebarea:

{question}

Acestea sunt variantele de raspuns:

{answers}

==================="""

_QA_BETTER_NOCOT = """Esti un politist rutier. Vorbesti doar in limba romana.
Trebuie sa rezolvi o grila de la un test auto. Grila poate avea unul sau mai multe raspunsuri corecte. Vei folosi strict legile din Romania.

Gandeste logic, dar nu extrapola peste informatiile oferite. Judeca doar momentul descris, nu presupune alte situatii.

Reguli de gandire:

1. Citeste cu maxima atentie intrebarea si variantele de raspuns.

2. Identifica strict ce prevederi din legislatia rutiera din Romania se aplica situatiei date.

3. Daca raspunsul pare "mai sigur" dar este contrar legislatiei, urmeaza legea, nu instinctul de precautie.

4. Alege DOAR raspunsurile care sunt complet corecte conform textului legii --- nu ghici, nu completa informatii lipsa.

5. Daca un raspuns corect este mai bun decat altul dat ca si corect, include mai multe situatii specifice sau exceptii, atunci trebuie ales doar acela.

6. Fii atent la mici detalii care pot schimba sensul intrebarii sau al raspunsurilor (exista intrebari-capcana).

Raspunde direct cu variantale corecte.

De exemplu, raspunsul tau se va incheia cu:

"Raspuns corect: A"

sau

"Raspuns corect: A,B"

Aceasta este intrebarea:

{question}

Acestea sunt variantele de raspuns:

{answers}

Aceastea sunt legile relevante, dar nu neaparat toate sunt relevante:

{documents}

==================="""

_CAPTION = """Descrie urmatoare imagine incluzand detalii legate de condus, indicatoare, ce se intampla in imagine.

Limiteaza-te la 50-100 cuvinte.

Foloseste numele indicatorului daca il cunosti, altfel o descriere succinta."""

_VIR_IMG_REWRITE = """Esti un politist rutier. Vorbesti doar in limba romana.
Primesti o grila de la un test auto care are atasata si o imagine. Trebuie sa selectezi din imagine informatiile necesare, astfel incat sa imbuntatesti intrebarea originala si a facilita cautarea unor articole de lege relevante.

Include informatiile relevante despre situatie, indicatoare, si altele elemente specifice condusului si legii.

Reguli de gandire:

1. Citeste cu maxima atentie intrebarea si variantele de raspuns.

2. Analizeaza imaginea si extrage informatiile cele mai importante

3. Fii atent la mici detalii care pot schimba sensul intrebarii sau al raspunsurilor

4. Explica ce anume trebuie introdus in intrebare pentru a cauta informatiile corecte

La final, ultima parte din raspuns trebuie sa fie intrebarea reformulata.

"Raspuns final: [intrebare]"

Aceasta este intrebarea:

{question}

Acestea sunt variantele de raspuns:

{answers}

==================="""

_VIR_IMG_CAPTION_REWRITE = """Esti un politist rutier. Vorbesti doar in limba romana.
Primesti o grila de la un test auto care are atasata si o imagine. Trebuie sa selectezi din imagine informatiile necesare, astfel incat sa imbuntatesti intrebarea originala si a facilita cautarea unor articole de lege relevante.

Include informatiile relevante despre situatie, indicatoare, si altele elemente specifice condusului si legii.

Reguli de gandire:

1. Citeste cu maxima atentie intrebarea si variantele de raspuns.

2. Analizeaza imaginea si extrage informatiile cele mai importante

3. Fii atent la mici detalii care pot schimba sensul intrebarii sau al raspunsurilor

4. Explica ce anume trebuie introdus in intrebare pentru a cauta informatiile corecte

La final, ultima parte din raspuns trebuie sa fie intrebarea reformulata.

"Raspuns final: [intrebare]"

Aceasta este intrebarea:

{question}

Acestea sunt variantele de raspuns:

{answers}

Aceasta este descrierea imaginii:

{caption}

==================="""

_VQA_NORAG = """Esti un politist rutier. Vorbesti doar in limba romana.
Trebuie sa rezolvi o grila de la un test auto. Grila poate avea unul sau mai multe raspunsuri corecte. Vei folosi strict legile din Romania.
Vei primi o intrebare alaturi de o imagine, intrebarea avand stransa legatura cu intrebarea.

Gandeste logic, dar nu extrapola peste informatiile oferite. Judeca doar momentul descris, nu presupune alte situatii.

Reguli de gandire:

1. Citeste cu maxima atentie intrebarea si variantele de raspuns.

2. Identifica strict ce prevederi din legislatia rutiera din Romania se aplica situatiei date.

3. Daca raspunsul pare "mai sigur" dar este contrar legislatiei, urmeaza legea, nu instinctul de precautie.

4. Alege DOAR raspunsurile care sunt complet corecte conform textului legii --- nu ghici, nu completa informatii lipsa.

5. Daca un raspuns corect este mai bun decat altul dat ca si corect, include mai multe situatii specifice sau exceptii, atunci trebuie ales doar acela.

6. Argumenteaza clar de ce ai ales fiecare raspuns corect. Daca exista mai multe raspunsuri corecte, explica fiecare alegere separat.

7. Fii atent la mici detalii care pot schimba sensul intrebarii sau al raspunsurilor (exista intrebari-capcana).

La final, ultima parte din raspuns trebuie sa fie litera sau literele corecte.

De exemplu, raspunsul tau se va incheia cu:

"Raspuns corect: A"

sau

"Raspuns corect: A,B"

Aceasta este intrebarea:

{question}

Acestea sunt variantele de raspuns:

{answers}

==================="""

_VQA_RAG = """Esti un politist rutier. Vorbesti doar in limba romana.
Trebuie sa rezolvi o grila de la un test auto. Grila poate avea unul sau mai multe raspunsuri corecte. Vei folosi strict legile din Romania.
Vei primi o intrebare alaturi de o imagine, intrebarea avand stransa legatura cu intrebarea.

Gandeste logic, dar nu extrapola peste informatiile oferite. Judeca doar momentul descris, nu presupune alte situatii.

Reguli de gandire:

1. Citeste cu maxima atentie intrebarea si variantele de raspuns.

2. Identifica strict ce prevederi din legislatia rutiera din Romania se aplica situatiei date.

3. Daca raspunsul pare "mai sigur" dar este contrar legislatiei, urmeaza legea, nu instinctul de precautie.

4. Alege DOAR raspunsurile care sunt complet corecte conform textului legii --- nu ghici, nu completa informatii lipsa.

5. Daca un raspuns corect este mai bun decat altul dat ca si corect, include mai multe situatii specifice sau exceptii, atunci trebuie ales doar acela.

6. Argumenteaza clar de ce ai ales fiecare raspuns corect. Daca exista mai multe raspunsuri corecte, explica fiecare alegere separat.

7. Fii atent la mici detalii care pot schimba sensul intrebarii sau al raspunsurilor (exista intrebari-capcana).

La final, ultima parte din raspuns trebuie sa fie litera sau literele corecte.

De exemplu, raspunsul tau se va incheia cu:

"Raspuns corect: A"

sau

"Raspuns corect: A,B"

Aceasta este intrebarea:

{question}

Acestea sunt variantele de raspuns:

{answers}

Aceastea sunt legile relevante, dar nu neaparat toate sunt relevante:

{documents_laws}

{documents_indicators}

==================="""

TEMPLATES: dict[str, PromptTemplate] = {
    t.id: t
    for t in (
        PromptTemplate("qa_rag", _QA_RAG),
        PromptTemplate("qa_norag", _QA_NORAG),
        PromptTemplate("qa_rag_better", _QA_RAG_BETTER),
        PromptTemplate("qa_norag_better", _QA_NORAG_BETTER),
        PromptTemplate("qa_better_nocot", _QA_BETTER_NOCOT),
        PromptTemplate("vir_rephrase", _VIR_REPHRASE),
        PromptTemplate("vir_img_rewrite", _VIR_IMG_REWRITE),
        PromptTemplate("vir_img_caption_rewrite", _VIR_IMG_CAPTION_REWRITE),
        PromptTemplate("caption", _CAPTION),
        PromptTemplate("vqa_norag", _VQA_NORAG),
        PromptTemplate("vqa_rag", _VQA_RAG),
    )
}

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")


def format_documents(docs: Sequence[tuple[str, str]]) -> str:
    """Join documents as numbered blocks carrying their ids.

    Each block starts ``n. [doc_id]`` followed by the document text; blocks
    are separated by blank lines.
    """
    blocks = [f"{i}. [{doc_id}]\n{text}" for i, (doc_id, text) in enumerate(docs, start=1)]
    return "\n\n".join(blocks)


def render_prompt(template_id: str, bindings: dict) -> str:
    """Substitute placeholder bindings into a registered template.

    A document list value (sequence of (id, text) pairs) is formatted with
    :func:`format_documents` first. Unbound placeholders raise RenderError;
    bindings that the template has no placeholder for only warn.
    """
    if template_id not in TEMPLATES:
        raise RenderError(f"unknown template {template_id!r}")
    template = TEMPLATES[template_id]
    needed = template.placeholders
    missing = sorted(needed - set(bindings))
    if missing:
        raise RenderError(f"template {template_id}: unbound placeholders {missing}")
    extra = sorted(set(bindings) - needed)
    if extra:
        warnings.warn(
            f"template {template_id}: bindings {extra} have no placeholder", stacklevel=2
        )

    values = {}
    for name in needed:
        value = bindings[name]
        if not isinstance(value, str):
            value = format_documents(value)
        values[name] = value
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], template.text)


# ---------------------------------------------------------------------------
# chat requests

@dataclass(frozen=True)
class Message:
    role: str
    text: str
    image: bytes | None = None
    image_media_type: str = "image/png"


@dataclass(frozen=True)
class ChatRequest:
    """One chat call; temperature/seed are omitted when None.

    Reasoning-style model configs run without temperature or seed; the
    sampled configs default to temperature 0 with a fixed seed upstream.
    """

    model_id: str
    messages: tuple[Message, ...]
    temperature: float | None = None
    seed: int | None = None

    @property
    def has_image(self) -> bool:
        return any(m.image is not None for m in self.messages)


def user_request(
    model_id: str,
    prompt: str,
    image: bytes | None = None,
    temperature: float | None = None,
    seed: int | None = None,
) -> ChatRequest:
    return ChatRequest(
        model_id=model_id,
        messages=(Message(role="user", text=prompt, image=image),),
        temperature=temperature,
        seed=seed,
    )


def request_digest(request: ChatRequest) -> str:
    """Content digest of everything that can influence the response."""
    canonical = {
        "model": request.model_id,
        "temperature": request.temperature,
        "seed": request.seed,
        "messages": [
            {
                "role": m.role,
                "text": m.text,
                "image_sha256": hashlib.sha256(m.image).hexdigest() if m.image else None,
            }
            for m in request.messages
        ],
    }
    payload = json.dumps(canonical, ensure_ascii=False, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ChatBackend(Protocol):
    """Transport adapter that turns a ChatRequest into response text."""

    supports_vision: bool

    def generate(self, request: ChatRequest) -> str: ...


class ResponseCache:
    """Content-addressed response store, one file per request digest."""

    def __init__(self, cache_dir: str | Path):
        self.root = Path(cache_dir) / "chat"
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        return self.root / f"{digest}.txt"

    def get(self, digest: str) -> str | None:
        path = self._path(digest)
        return path.read_text(encoding="utf-8") if path.exists() else None

    def put(self, digest: str, text: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, self._path(digest))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def complete(
    request: ChatRequest,
    backend: ChatBackend,
    cache: ResponseCache | None = None,
    max_attempts: int = 3,
    backoff: float = 0.5,
    sleep=time.sleep,
) -> str:
    """Send a chat request through cache and bounded retries.

    Transport failures retry with exponential backoff up to ``max_attempts``;
    a refusal is raised immediately. Identical requests are served from the
    cache without touching the backend.
    """
    if request.has_image and not getattr(backend, "supports_vision", False):
        raise TransportError(
            f"model {request.model_id!r} received an image but backend is not vision-capable"
        )
    digest = request_digest(request)
    if cache is not None:
        hit = cache.get(digest)
        if hit is not None:
            return hit

    last: TransportError | None = None
    for attempt in range(max_attempts):
        try:
            text = backend.generate(request)
            break
        except GenerationRefusedError:
            raise
        except TransportError as exc:
            last = exc
            if attempt + 1 < max_attempts:
                sleep(backoff * (2**attempt))
    else:
        raise TransportError(
            f"chat call failed after {max_attempts} attempts: {last}"
        ) from last

    if cache is not None:
        cache.put(digest, text)
    return text


# ---------------------------------------------------------------------------
# captioning and query rewriting

class CaptionCache:
    """Captions persist keyed by image digest, one text file per image."""

    def __init__(self, cache_dir: str | Path):
        self.root = Path(cache_dir) / "captions"
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, image_digest: str) -> Path:
        return self.root / f"{image_digest}.txt"

    def get(self, image_digest: str) -> str | None:
        path = self._path(image_digest)
        return path.read_text(encoding="utf-8") if path.exists() else None

    def put(self, image_digest: str, text: str) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(text)
            os.replace(tmp, self._path(image_digest))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def generate_caption(
    image: bytes,
    backend: ChatBackend,
    model_id: str,
    caption_cache: CaptionCache | None = None,
    temperature: float | None = None,
    seed: int | None = None,
    **complete_kwargs,
) -> str:
    """Describe an image with the captioning prompt; cache by image digest.

    The 50-100 word limit lives in the prompt only; an out-of-range caption
    is logged and returned as-is.
    """
    image_digest = hashlib.sha256(image).hexdigest()
    if caption_cache is not None:
        hit = caption_cache.get(image_digest)
        if hit is not None:
            return hit

    prompt = render_prompt("caption", {})
    request = user_request(model_id, prompt, image=image, temperature=temperature, seed=seed)
    caption = complete(request, backend, **complete_kwargs)

    n_words = len(caption.split())
    if not (CAPTION_MIN_WORDS <= n_words <= CAPTION_MAX_WORDS):
        logger.warning(
            "caption for image %s has %d words, outside %d-%d",
            image_digest[:12],
            n_words,
            CAPTION_MIN_WORDS,
            CAPTION_MAX_WORDS,
        )
    if caption_cache is not None:
        caption_cache.put(image_digest, caption)
    return caption


def rewrite_query(
    item: QAItem,
    backend: ChatBackend,
    model_id: str,
    image: bytes | None = None,
    caption: str | None = None,
    temperature: float | None = None,
    seed: int | None = None,
    **complete_kwargs,
) -> str:
    """Ask the model to rewrite a question into a retrieval query.

    Template selection follows the provided extras: text-only rephrase,
    image rewrite, or image-plus-caption rewrite. The rewritten query is the
    trimmed text after the LAST ``Raspuns final:`` marker; a response without
    the marker is a RewriteError.
    """
    bindings: dict = {"question": item.question, "answers": format_options(item.options)}
    if image is not None and caption is not None:
        template_id = "vir_img_caption_rewrite"
        bindings["caption"] = caption
    elif image is not None:
        template_id = "vir_img_rewrite"
    else:
        template_id = "vir_rephrase"

    prompt = render_prompt(template_id, bindings)
    request = user_request(model_id, prompt, image=image, temperature=temperature, seed=seed)
    text = complete(request, backend, **complete_kwargs)
    try:
        return parse_rewrite(text)
    except RewriteError:
        raise RewriteError(
            f"rewrite for {item.id}: no {REWRITE_MARKER!r} marker in response"
        ) from None


def parse_rewrite(text: str) -> str:
    """Text after the LAST rewrite marker, trimmed; no marker is an error."""
    span = _last_marker(text, _REWRITE_MARKER_RE)
    if span is None:
        raise RewriteError(f"no {REWRITE_MARKER!r} marker in response")
    return text[span[1] :].strip()


# ---------------------------------------------------------------------------
# answer parsing

@dataclass(frozen=True)
class ParsedAnswer:
    """Result of scanning a model response for the final-answer contract.

    ``letters`` is empty exactly when parsing failed; ``marker_found``
    distinguishes a missing marker from an unusable tail, which is kept in
    ``raw_tail`` for inspection.
    """

    letters: frozenset[str]
    marker_found: bool
    raw_tail: str

    @property
    def ok(self) -> bool:
        return bool(self.letters)


def _fold(text: str) -> str:
    """Length-preserving accent fold so marker offsets map back to the input."""
    out = []
    for ch in text:
        decomposed = unicodedata.normalize("NFD", ch)
        base = decomposed[0] if decomposed else ch
        out.append(base if not unicodedata.combining(base) else ch)
    return "".join(out)


_ANSWER_MARKER_RE = re.compile(r"(?:raspuns\s+corect|correct\s+answer)\s*:", re.IGNORECASE)
_REWRITE_MARKER_RE = re.compile(r"(?:raspuns\s+final|final\s+answer)\s*:", re.IGNORECASE)

_NONE_TOKENS = {"none", "niciuna", "niciunul"}


def _last_marker(text: str, pattern: re.Pattern) -> tuple[int, int] | None:
    folded = _fold(text)
    last = None
    for m in pattern.finditer(folded):
        last = m.span()
    return last


def parse_answer_letters(text: str, valid_letters: Sequence[str]) -> ParsedAnswer:
    """Extract the answer letter set from a model response.

    Only the LAST answer marker counts, matched accent- and
    case-insensitively in both the Romanian and English wording. The letters
    on the marker line may be separated by commas with arbitrary spacing and
    wrapped in light punctuation. Any token outside the valid letters, a
    "none" answer, or a missing marker yields a parse failure with an empty
    letter set.
    """
    valid = {l.upper() for l in valid_letters}
    span = _last_marker(text, _ANSWER_MARKER_RE)
    if span is None:
        return ParsedAnswer(letters=frozenset(), marker_found=False, raw_tail="")

    raw_tail = text[span[1] :]
    line = raw_tail.strip().split("\n", 1)[0]
    letters: set[str] = set()
    failed = False
    for piece in line.split(","):
        token = piece.strip().strip("*\"'`()[].;:!")
        if not token:
            continue
        if token.lower() in _NONE_TOKENS:
            failed = True
            break
        if len(token) == 1 and token.upper() in valid:
            letters.add(token.upper())
        else:
            failed = True
            break
    if failed or not letters:
        return ParsedAnswer(letters=frozenset(), marker_found=True, raw_tail=raw_tail)
    return ParsedAnswer(letters=frozenset(letters), marker_found=True, raw_tail=raw_tail)


_STEP_RE = re.compile(r"^\s*(\d+)\.", re.MULTILINE)


def count_reasoning_steps(text: str) -> int:
    """Count distinct top-level ``n.`` step markers before the final answer.

    Nested numbering such as ``1.1`` shares its top-level number and is not
    counted again. Direct answers (no numbered lines) count zero.
    """
    span = _last_marker(text, _ANSWER_MARKER_RE)
    region = text if span is None else text[: span[0]]
    return len({int(m.group(1)) for m in _STEP_RE.finditer(region)})
