"""Exception types shared across the package.

Every error raised on a per-record basis carries enough context (record id,
file line, violated rule) to locate the offending input without a debugger.
"""

from __future__ import annotations


class LawragError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LawragError):
    """A corpus or question record violates the documented schema.

    ``code`` is a stable machine-readable name for the violated rule
    (e.g. ``duplicate-id``, ``dangling-ref``) so callers and tests can
    dispatch on it without parsing the message.
    """

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class EmbeddingTextError(LawragError):
    """Document embedding text cannot be built within the token budget."""


class IndexBuildError(LawragError):
    """Vector index construction failed (duplicate ids, backend failure)."""


class SearchError(LawragError):
    """A similarity search was issued against an unusable index."""


class QueryBuildError(LawragError):
    """A query strategy was asked to render without its required inputs."""


class RerankError(LawragError):
    """Reranker backend failed; the candidate run is kept for diagnostics."""

    def __init__(self, message: str, candidates=None):
        super().__init__(message)
        self.candidates = candidates


class MiningError(LawragError):
    """Hard-negative mining could not satisfy its contract for an item."""


class BundleError(LawragError):
    """Training bundle export was asked to write an invalid bundle."""


class TrainingDelegatedError(LawragError):
    """No in-process trainer is configured; the bundle is the hand-off."""


class RenderError(LawragError):
    """A prompt template placeholder was left unbound at render time."""


class TransportError(LawragError):
    """A chat/embedding HTTP call failed at the transport level."""


class GenerationRefusedError(LawragError):
    """The model refused to answer (content policy); not retryable."""


class RewriteError(LawragError):
    """A query-rewrite response did not contain the final-answer marker."""


class ResumeError(LawragError):
    """Run directory cannot be resumed (manifest missing or mismatched)."""


class ReportError(LawragError):
    """Report construction was given inconsistent or empty inputs."""
