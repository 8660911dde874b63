"""Query formulation from the trigger token's attention over the full context."""
from __future__ import annotations

import csv
from dataclasses import dataclass

from .stopwords import StopwordSet
from .trace import GenerationTrace, context_word_key, word_of_context_position


class QueryFormulationError(ValueError):
    """No usable query could be built at the trigger position."""


@dataclass(frozen=True)
class Query:
    """Words selected by attention rank, emitted in original context order."""

    words: tuple[str, ...]
    source_positions: tuple[int, ...]
    n_requested: int


def _is_masked(trace: GenerationTrace, position: int, mask_prompt_regions: bool) -> bool:
    if not mask_prompt_regions or position >= trace.prompt_len:
        return False
    return trace.prompt_tokens[position].maskable


def _ranked_positions(row) -> list[int]:
    # Descending attention; ties resolve toward the earlier context position.
    return sorted(range(len(row)), key=lambda p: (-row[p], p))


def formulate(
    trace: GenerationTrace,
    trigger_position: int,
    n: int,
    stopwords: StopwordSet,
    mask_prompt_regions: bool = True,
) -> Query:
    """Build the retrieval query for a trigger at ``trigger_position``.

    Walks the trigger token's attention row (prompt positions included) in
    descending order and collects the containing words, skipping stopword-only
    words, masked prompt regions, and words already collected, until ``n``
    distinct words are selected or the ranking is exhausted. Output order is
    the original text order, not attention order.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if trigger_position < 0 or trigger_position >= len(trace.tokens):
        raise IndexError(f"trigger position {trigger_position} out of range")
    row = trace.tokens[trigger_position].attention_row
    if row is None:
        raise QueryFormulationError("trigger token has no attention row")
    if len(row) == 0:
        raise QueryFormulationError("no preceding context to draw query words from")

    first_position: dict[tuple[str, int], int] = {}
    for pos in _ranked_positions(row):
        if _is_masked(trace, pos, mask_prompt_regions):
            continue
        word = word_of_context_position(trace, pos)
        if stopwords.contains_word(word):
            continue
        key = context_word_key(trace, pos)
        if key in first_position:
            continue
        first_position[key] = pos
        if len(first_position) == n:
            break

    if not first_position:
        raise QueryFormulationError("every candidate context word was a stopword or masked")

    ordered = sorted(first_position.values())
    words = tuple(word_of_context_position(trace, pos) for pos in ordered)
    return Query(words=words, source_positions=tuple(ordered), n_requested=n)


def render(query: Query) -> str:
    return " ".join(query.words)


EXPLAIN_COLUMNS = ("position", "word", "attention", "selected")


def explain(
    trace: GenerationTrace,
    trigger_position: int,
    n: int,
    stopwords: StopwordSet,
    mask_prompt_regions: bool = True,
) -> list[tuple]:
    """Per-position rows (position, word, attention, selected?) for one formulation."""
    row = trace.tokens[trigger_position].attention_row or ()
    try:
        selected = set(
            formulate(trace, trigger_position, n, stopwords, mask_prompt_regions).source_positions
        )
    except QueryFormulationError:
        selected = set()
    return [
        (pos, word_of_context_position(trace, pos), weight, pos in selected)
        for pos, weight in enumerate(row)
    ]


def dump_explain_csv(rows: list[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EXPLAIN_COLUMNS)
        writer.writerows(rows)
