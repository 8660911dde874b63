"""Generation-trace data model: per-token text, entropy, probability and attention."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

TRACE_FORMAT = "trace.v1"
ATTENTION_POLICY = "last_layer_mean"

FINISHED_REASONS = ("length_cap", "end_marker", "backend_stop")

ATTENTION_SUM_TOL = 1e-4
DISTRIBUTION_SUM_TOL = 1e-6
ENTROPY_MATCH_TOL = 1e-9


class TraceValidationError(ValueError):
    """A trace violated an invariant; the message names the first violation."""


class DistributionError(ValueError):
    """A probability distribution is malformed."""


@dataclass(frozen=True)
class ProbabilityDistribution:
    """Full next-token distribution at one decoding step (mock path only)."""

    probs: tuple[tuple[str, float], ...]

    def validate(self) -> None:
        for item, p in self.probs:
            if p < 0.0 or p > 1.0:
                raise DistributionError(f"probability {p!r} for {item!r} outside [0, 1]")
        total = sum(p for _, p in self.probs)
        if abs(total - 1.0) > DISTRIBUTION_SUM_TOL:
            raise DistributionError(f"distribution sums to {total!r}, expected 1")

    def top_prob(self) -> float:
        return max(p for _, p in self.probs) if self.probs else 0.0


def compute_entropy(dist: ProbabilityDistribution) -> float:
    """Entropy of a next-token distribution in nats; zero-probability terms add 0."""
    dist.validate()
    acc = 0.0
    for _, p in dist.probs:
        if p > 0.0:
            acc -= p * math.log(p)
    return max(acc, 0.0)


@dataclass(frozen=True)
class PromptToken:
    """One prompt-side token: surface text and the prompt word it belongs to."""

    surface: str
    word_index: int
    maskable: bool = False


@dataclass(frozen=True)
class TokenRecord:
    """One generated token with its uncertainty and attention footprint.

    ``attention_row`` covers every context position strictly before this token
    (prompt positions first, then generated positions 0..position-1), averaged
    over heads in the last layer. ``distribution`` is only present on the mock
    path, where the backend ships the full next-token distribution.
    """

    position: int
    surface: str
    word_index: int
    entropy: float
    top_prob: float
    attention_row: tuple[float, ...] | None = None
    distribution: ProbabilityDistribution | None = None


@dataclass(frozen=True)
class GenerationTrace:
    """Record of one backend call: prompt tokens, generated tokens, stop reason.

    Immutable after validation; safe to share across concurrent workers.
    """

    prompt_len: int
    prompt_text: str
    output_text: str
    prompt_tokens: tuple[PromptToken, ...]
    tokens: tuple[TokenRecord, ...]
    finished_reason: str
    attention_policy: str = ATTENTION_POLICY
    vocab_size: int | None = None

    @property
    def prompt_words(self) -> list[str]:
        return self.prompt_text.split()

    @property
    def output_words(self) -> list[str]:
        return self.output_text.split()


def word_of_token(trace: GenerationTrace, position: int) -> str:
    """Full whitespace-delimited output word containing the token at ``position``.

    A whitespace-only output has no words; such tokens resolve to "" (which
    downstream counts as a stopword).
    """
    if position < 0 or position >= len(trace.tokens):
        raise IndexError(f"token position {position} out of range (trace has {len(trace.tokens)})")
    words = trace.output_words
    if not words:
        return ""
    return words[trace.tokens[position].word_index]


def word_of_context_position(trace: GenerationTrace, position: int) -> str:
    """Containing word for an absolute context position (prompt then generated)."""
    if position < 0 or position >= trace.prompt_len + len(trace.tokens):
        raise IndexError(f"context position {position} out of range")
    if position < trace.prompt_len:
        words = trace.prompt_words
        if not words:
            return ""
        return words[trace.prompt_tokens[position].word_index]
    return word_of_token(trace, position - trace.prompt_len)


def context_word_key(trace: GenerationTrace, position: int) -> tuple[str, int]:
    """Identity key of the word at a context position, distinct across prompt/output."""
    if position < trace.prompt_len:
        return ("p", trace.prompt_tokens[position].word_index)
    return ("o", trace.tokens[position - trace.prompt_len].word_index)


def _check_word_indices(surfaces, word_indices, words, side: str) -> None:
    prev = 0
    for k, (surface, wi) in enumerate(zip(surfaces, word_indices)):
        if not words:
            if wi != 0:
                raise TraceValidationError(f"{side} token {k} has word_index {wi} but text has no words")
            continue
        if wi < 0 or wi >= len(words):
            raise TraceValidationError(f"{side} token {k} word_index {wi} out of range ({len(words)} words)")
        if wi < prev:
            raise TraceValidationError(f"{side} token {k} word_index {wi} decreases (previous {prev})")
        stripped = surface.strip()
        if stripped and stripped not in words[wi]:
            raise TraceValidationError(
                f"{side} token {k} surface {surface!r} not contained in word {words[wi]!r}"
            )
        prev = wi


def validate_trace(trace: GenerationTrace) -> GenerationTrace:
    """Check every trace invariant; raise naming the first violation.

    Validation is reject-only: the trace is never mutated or repaired.
    """
    if trace.finished_reason not in FINISHED_REASONS:
        raise TraceValidationError(f"unknown finished_reason {trace.finished_reason!r}")
    if trace.attention_policy != ATTENTION_POLICY:
        raise TraceValidationError(
            f"attention policy {trace.attention_policy!r} does not match engine policy {ATTENTION_POLICY!r}"
        )
    if trace.prompt_len != len(trace.prompt_tokens):
        raise TraceValidationError(
            f"prompt_len {trace.prompt_len} != {len(trace.prompt_tokens)} prompt tokens"
        )
    joined = "".join(t.surface for t in trace.prompt_tokens)
    if joined != trace.prompt_text:
        raise TraceValidationError("prompt surfaces do not concatenate to prompt_text")
    joined = "".join(t.surface for t in trace.tokens)
    if joined != trace.output_text:
        raise TraceValidationError("token surfaces do not concatenate to output_text")

    entropy_cap = math.log(trace.vocab_size) + 1e-4 if trace.vocab_size else None
    for k, tok in enumerate(trace.tokens):
        if tok.position != k:
            raise TraceValidationError(f"token {k} carries position {tok.position}")
        if tok.entropy < 0.0:
            raise TraceValidationError(f"token {k} entropy {tok.entropy!r} is negative")
        if entropy_cap is not None and tok.entropy > entropy_cap:
            raise TraceValidationError(
                f"token {k} entropy {tok.entropy!r} exceeds ln(vocab_size) bound"
            )
        if tok.top_prob < 0.0 or tok.top_prob > 1.0 + 1e-9:
            raise TraceValidationError(f"token {k} top_prob {tok.top_prob!r} outside [0, 1]")
        row = tok.attention_row
        if row is not None:
            expected = trace.prompt_len + k
            if len(row) != expected:
                raise TraceValidationError(
                    f"token {k} attention row has {len(row)} entries, expected {expected}"
                )
            if any(a < 0.0 for a in row):
                raise TraceValidationError(f"token {k} attention row has a negative entry")
            if row:
                total = sum(row)
                if abs(total - 1.0) > ATTENTION_SUM_TOL:
                    raise TraceValidationError(
                        f"token {k} attention row sums to {total!r}, expected 1 +/- {ATTENTION_SUM_TOL}"
                    )
        if tok.distribution is not None:
            try:
                recomputed = compute_entropy(tok.distribution)
            except DistributionError as exc:
                raise TraceValidationError(f"token {k} distribution malformed: {exc}") from exc
            if abs(recomputed - tok.entropy) > ENTROPY_MATCH_TOL:
                raise TraceValidationError(
                    f"token {k} entropy {tok.entropy!r} disagrees with its distribution ({recomputed!r})"
                )
            if abs(tok.distribution.top_prob() - tok.top_prob) > ENTROPY_MATCH_TOL:
                raise TraceValidationError(
                    f"token {k} top_prob disagrees with its distribution"
                )

    _check_word_indices(
        [t.surface for t in trace.prompt_tokens],
        [t.word_index for t in trace.prompt_tokens],
        trace.prompt_words,
        "prompt",
    )
    _check_word_indices(
        [t.surface for t in trace.tokens],
        [t.word_index for t in trace.tokens],
        trace.output_words,
        "output",
    )
    return trace


# Wire format (.trace.json): one JSON object per trace, attention rows as float
# arrays; the same payload is served by the /generate endpoint.

def trace_to_dict(trace: GenerationTrace) -> dict:
    tokens = []
    for tok in trace.tokens:
        rec: dict = {
            "position": tok.position,
            "surface": tok.surface,
            "word_index": tok.word_index,
            "entropy": tok.entropy,
            "top_prob": tok.top_prob,
            "attention_row": list(tok.attention_row) if tok.attention_row is not None else None,
        }
        if tok.distribution is not None:
            rec["distribution"] = [[item, p] for item, p in tok.distribution.probs]
        tokens.append(rec)
    return {
        "format": TRACE_FORMAT,
        "attention_policy": trace.attention_policy,
        "prompt_len": trace.prompt_len,
        "prompt_text": trace.prompt_text,
        "output_text": trace.output_text,
        "vocab_size": trace.vocab_size,
        "finished_reason": trace.finished_reason,
        "prompt_tokens": [
            {"surface": t.surface, "word_index": t.word_index, "maskable": t.maskable}
            for t in trace.prompt_tokens
        ],
        "tokens": tokens,
    }


def trace_from_dict(payload: dict, validate: bool = True) -> GenerationTrace:
    if payload.get("format") != TRACE_FORMAT:
        raise TraceValidationError(f"unsupported trace format {payload.get('format')!r}")
    prompt_tokens = tuple(
        PromptToken(t["surface"], t["word_index"], bool(t.get("maskable", False)))
        for t in payload["prompt_tokens"]
    )
    tokens = []
    for rec in payload["tokens"]:
        dist = None
        if rec.get("distribution") is not None:
            dist = ProbabilityDistribution(tuple((i, float(p)) for i, p in rec["distribution"]))
        row = rec.get("attention_row")
        tokens.append(
            TokenRecord(
                position=rec["position"],
                surface=rec["surface"],
                word_index=rec["word_index"],
                entropy=float(rec["entropy"]),
                top_prob=float(rec["top_prob"]),
                attention_row=tuple(float(a) for a in row) if row is not None else None,
                distribution=dist,
            )
        )
    trace = GenerationTrace(
        prompt_len=payload["prompt_len"],
        prompt_text=payload["prompt_text"],
        output_text=payload["output_text"],
        prompt_tokens=prompt_tokens,
        tokens=tuple(tokens),
        finished_reason=payload["finished_reason"],
        attention_policy=payload.get("attention_policy", ATTENTION_POLICY),
        vocab_size=payload.get("vocab_size"),
    )
    if validate:
        validate_trace(trace)
    return trace


def trace_to_json(trace: GenerationTrace) -> str:
    return json.dumps(trace_to_dict(trace), sort_keys=True)


def trace_from_json(text: str, validate: bool = True) -> GenerationTrace:
    return trace_from_dict(json.loads(text), validate=validate)
