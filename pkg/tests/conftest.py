"""Shared builders: hand-made and randomized traces, small corpora."""
from __future__ import annotations

import math
import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dynrag.gateway import _word_indices_for_surfaces, expand_attention_row
from dynrag.stopwords import StopwordSet
from dynrag.trace import (
    GenerationTrace,
    ProbabilityDistribution,
    PromptToken,
    TokenRecord,
    compute_entropy,
    validate_trace,
)


def dist(*pairs) -> ProbabilityDistribution:
    return ProbabilityDistribution(tuple(pairs))


def uniform_dist(k: int) -> ProbabilityDistribution:
    return ProbabilityDistribution(tuple((f"v{i}", 1.0 / k) for i in range(k)))


def peaked_dist(top: float = 0.99) -> ProbabilityDistribution:
    return ProbabilityDistribution((("a", top), ("b", 1.0 - top)))


def top_prob_dist(top: float) -> ProbabilityDistribution:
    """Distribution whose maximum probability is exactly ``top``."""
    full = int(1.0 / top)
    items = [(f"v{i}", top) for i in range(full)]
    remainder = 1.0 - full * top
    if remainder > 1e-12:
        items.append((f"v{full}", remainder))
    return ProbabilityDistribution(tuple(items))


def build_trace(
    prompt_words,
    steps,
    maskable=(),
    finished_reason="backend_stop",
    vocab_size=None,
    validate=True,
) -> GenerationTrace:
    """Assemble a trace from prompt words and per-token step dicts.

    Each step: {"surface": str, "dist": ProbabilityDistribution,
    "attention": full row list | {pos: weight} pins | None (uniform)}.
    """
    prompt_text = " ".join(prompt_words)
    prompt_tokens = tuple(
        PromptToken(
            surface=(word if i == 0 else " " + word),
            word_index=i,
            maskable=i in maskable,
        )
        for i, word in enumerate(prompt_words)
    )
    prompt_len = len(prompt_tokens)

    surfaces = [step["surface"] for step in steps]
    output_text = "".join(surfaces)
    word_indices = [wi for _, wi in _word_indices_for_surfaces(output_text, surfaces)]

    tokens = []
    for k, step in enumerate(steps):
        d = step["dist"]
        attention = step.get("attention")
        if isinstance(attention, dict) or attention is None:
            row = expand_attention_row(attention, prompt_len + k)
        else:
            row = tuple(attention)
        tokens.append(
            TokenRecord(
                position=k,
                surface=step["surface"],
                word_index=word_indices[k],
                entropy=compute_entropy(d),
                top_prob=d.top_prob(),
                attention_row=row,
                distribution=d,
            )
        )
    trace = GenerationTrace(
        prompt_len=prompt_len,
        prompt_text=prompt_text,
        output_text=output_text,
        prompt_tokens=prompt_tokens,
        tokens=tuple(tokens),
        finished_reason=finished_reason,
        vocab_size=vocab_size,
    )
    return validate_trace(trace) if validate else trace


CONTENT_WORDS = [
    "Genghis", "Khan", "film", "Morayta", "died", "1999", "empire", "director",
    "Pakistan", "frost", "battle", "emperor", "dynasty", "harbor", "steppe",
    "kicker", "composer", "voyage", "glacier", "Hypocrite",
]
STOP_WORDS = ["the", "of", "in", "was", "a", "and", "to", "is", "The"]
SUBWORD_PIECES = {
    "Genghis": ["Gen", "ghis"],
    "Morayta": ["Mor", "ay", "ta"],
    "Hypocrite": ["Hypo", "crite"],
    "empire": ["em", "pire"],
    "dynasty": ["dyn", "asty"],
    "composer": ["com", "pos", "er"],
}


def random_trace(
    rng: random.Random,
    max_tokens: int = 16,
    min_tokens: int = 2,
    prompt_min: int = 2,
    prompt_max: int = 6,
    mask_some: bool = False,
) -> GenerationTrace:
    """Random but fully valid trace: mixed stopwords, subword splits, random
    distributions and attention rows (occasionally peaked)."""
    prompt_words = [
        rng.choice(CONTENT_WORDS + STOP_WORDS) for _ in range(rng.randint(prompt_min, prompt_max))
    ]
    maskable = set()
    if mask_some:
        maskable = {i for i in range(len(prompt_words)) if rng.random() < 0.3}

    steps = []
    budget = rng.randint(min_tokens, max_tokens)
    while len(steps) < budget:
        word = rng.choice(CONTENT_WORDS + STOP_WORDS)
        if rng.random() < 0.15:
            word += rng.choice([".", ",", "?"])
        base = word.rstrip(".,?")
        pieces = [word]
        if base in SUBWORD_PIECES and rng.random() < 0.5:
            pieces = list(SUBWORD_PIECES[base])
            pieces[-1] += word[len(base):]
        for p, piece in enumerate(pieces):
            surface = (" " + piece) if p == 0 else piece
            k = rng.randint(2, 6)
            weights = [rng.random() ** 3 + 1e-6 for _ in range(k)]
            if rng.random() < 0.4:
                weights[rng.randrange(k)] *= 40.0
            total = sum(weights)
            d = ProbabilityDistribution(tuple((f"v{i}", w / total) for i, w in enumerate(weights)))
            steps.append({"surface": surface, "dist": d})
        if len(steps) >= budget:
            break
    steps = steps[: max(budget, 1)]

    return build_trace(
        prompt_words,
        _finalize_attention(steps, len(prompt_words), rng),
        maskable=maskable,
        finished_reason=rng.choice(["length_cap", "end_marker", "backend_stop"]),
    )


def _finalize_attention(steps, prompt_len, rng):
    for k, step in enumerate(steps):
        length = prompt_len + k
        if length == 0:
            step["attention"] = []
            continue
        weights = [rng.random() + 0.05 for _ in range(length)]
        if rng.random() < 0.5:
            weights[rng.randrange(length)] *= 12.0
        total = sum(weights)
        step["attention"] = [w / total for w in weights]
    return steps


@pytest.fixture
def stopwords() -> StopwordSet:
    return StopwordSet()


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240611)


def entropy_of_uniform(k: int) -> float:
    return math.log(k)
