"""Retrieval trigger scoring: entropy x downstream attention x stopword gate."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .stopwords import StopwordSet
from .trace import GenerationTrace, TraceValidationError, word_of_token


@dataclass(frozen=True)
class RindConfig:
    """Trigger threshold and the stopword set used for semantic gating."""

    theta: float
    stopwords: StopwordSet

    def __post_init__(self):
        if not self.theta > 0.0:
            raise ValueError(f"theta must be > 0, got {self.theta!r}")


@dataclass(frozen=True)
class TriggerDecision:
    """Outcome of scanning one trace for a retrieval trigger.

    ``position``/``score`` are None when nothing fired. ``per_token_scores``
    is always aligned with the generated tokens.
    """

    triggered: bool
    position: int | None
    score: float | None
    per_token_scores: tuple[float, ...] = field(default=())


def max_subsequent_attention(trace: GenerationTrace, position: int) -> float:
    """Highest attention any later generated token pays to the token at ``position``.

    The final generated token has no followers and gets 0.0 by convention,
    which means it can never trigger retrieval.
    """
    n = len(trace.tokens)
    if position < 0 or position >= n:
        raise IndexError(f"token position {position} out of range")
    target = trace.prompt_len + position
    best = 0.0
    for j in range(position + 1, n):
        row = trace.tokens[j].attention_row
        if row is None:
            raise TraceValidationError(f"token {j} has no attention row; request attention from the backend")
        value = row[target]
        if value > best:
            best = value
    return best


def semantic_indicator(trace: GenerationTrace, position: int, stopwords: StopwordSet) -> int:
    """0 for stopword tokens, 1 otherwise; judged on the token's whole word."""
    return 0 if stopwords.contains_word(word_of_token(trace, position)) else 1


def rind_score(entropy: float, a_max: float, s: int) -> float:
    return entropy * a_max * s


def detect(trace: GenerationTrace, config: RindConfig, exempt_until: int = 0) -> TriggerDecision:
    """Score every generated token and fire at the earliest eligible one.

    A position is eligible when it is >= ``exempt_until``; the trigger fires at
    the first eligible position whose score strictly exceeds theta. Positions
    before ``exempt_until`` are still scored (the score table is complete) but
    cannot fire, which prevents re-triggering on a freshly regenerated token.
    """
    if not trace.tokens:
        raise TraceValidationError("cannot scan an empty trace for triggers")
    if exempt_until < 0:
        raise ValueError(f"exempt_until must be >= 0, got {exempt_until}")

    scores = []
    for i in range(len(trace.tokens)):
        a_max = max_subsequent_attention(trace, i)
        s = semantic_indicator(trace, i, config.stopwords)
        scores.append(rind_score(trace.tokens[i].entropy, a_max, s))

    for i in range(exempt_until, len(scores)):
        if scores[i] > config.theta:
            return TriggerDecision(True, i, scores[i], tuple(scores))
    return TriggerDecision(False, None, None, tuple(scores))


SCORE_DUMP_COLUMNS = ("position", "surface", "entropy", "a_max", "s", "score")


def score_table(trace: GenerationTrace, config: RindConfig) -> list[tuple]:
    """Per-token rows (position, surface, entropy, a_max, s, score) for inspection."""
    rows = []
    for i, tok in enumerate(trace.tokens):
        a_max = max_subsequent_attention(trace, i)
        s = semantic_indicator(trace, i, config.stopwords)
        rows.append((i, tok.surface, tok.entropy, a_max, s, rind_score(tok.entropy, a_max, s)))
    return rows


def dump_scores_csv(trace: GenerationTrace, config: RindConfig, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_DUMP_COLUMNS)
        writer.writerows(score_table(trace, config))
