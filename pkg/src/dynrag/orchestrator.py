"""Generation loop: trigger detection, truncation, retrieval and re-prompting."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from . import bm25, qfs
from .gateway import GatewayError, GenerateRequest
from .qfs import QueryFormulationError
from .rind import RindConfig, TriggerDecision, detect
from .stopwords import StopwordSet
from .trace import GenerationTrace

logger = logging.getLogger("dynrag.orchestrator")

STRATEGY_KINDS = ("wo_rag", "sr_rag", "fl_rag", "fs_rag", "flare", "dragin")

REPROMPT_MARKER = "Answer in the same format as before."

# Words that end with one of these are never sentence boundaries.
ABBREVIATIONS = frozenset(
    {"dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "jr.", "sr.", "vs.", "etc.", "e.g.", "i.e.", "fig.", "f.w."}
)

_SENT_PUNCT_RE = re.compile(r"[.?!]+")


@dataclass(frozen=True)
class StrategyConfig:
    """Parameters for one retrieval strategy; unused knobs stay at None."""

    kind: str
    theta: float | None = None
    qfs_top_n: int | None = None
    flare_prob_threshold: float | None = None
    n_tokens_window: int = 25
    max_retrievals_per_question: int = 5
    generate_length: int = 100
    top_k: int = 3
    stop_markers: tuple[str, ...] = ()
    mask_exemplars: bool = True
    mask_question: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.max_retrievals_per_question < 1 or self.generate_length < 1 or self.top_k < 1:
            raise ValueError("caps must be >= 1")
        if self.kind == "dragin":
            if self.theta is None or not self.theta > 0:
                raise ValueError("dragin needs theta > 0")
            if self.qfs_top_n is None or self.qfs_top_n < 1:
                raise ValueError("dragin needs qfs_top_n >= 1")
        if self.kind == "flare" and (
            self.flare_prob_threshold is None or not 0 < self.flare_prob_threshold <= 1
        ):
            raise ValueError("flare needs flare_prob_threshold in (0, 1]")
        if self.kind == "fl_rag" and self.n_tokens_window < 1:
            raise ValueError("fl_rag needs n_tokens_window >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "theta": self.theta,
            "qfs_top_n": self.qfs_top_n,
            "flare_prob_threshold": self.flare_prob_threshold,
            "n_tokens_window": self.n_tokens_window,
            "max_retrievals_per_question": self.max_retrievals_per_question,
            "generate_length": self.generate_length,
            "top_k": self.top_k,
            "stop_markers": list(self.stop_markers),
            "mask_exemplars": self.mask_exemplars,
            "mask_question": self.mask_question,
        }


@dataclass(frozen=True)
class PromptTemplate:
    """Few-shot exemplar block plus an optional dataset instruction line."""

    exemplars: str = ""
    instruction: str | None = None


@dataclass(frozen=True)
class PromptBuild:
    """Assembled prompt text plus the character spans QFS must not draw from."""

    text: str
    boilerplate_spans: tuple[tuple[int, int], ...]
    question_span: tuple[int, int]


def assemble_prompt(
    template: PromptTemplate,
    question: str,
    committed_text: str,
    passages: list[str] | None,
) -> PromptBuild:
    """Render the generation prompt.

    With passages: exemplars, a Context block numbered from [1], the literal
    re-answer line, the question, then "Answer:" plus the committed text. With
    no passages (or an empty retrieval) the Context block and re-answer line
    are omitted entirely.
    """
    parts: list[str] = []
    boilerplate: list[tuple[int, int]] = []
    cursor = 0

    def push(text: str, masked: bool = False):
        nonlocal cursor
        if masked and text:
            boilerplate.append((cursor, cursor + len(text)))
        parts.append(text)
        cursor += len(text)

    if template.exemplars:
        push(template.exemplars, masked=True)
        push("\n\n")
    if passages:
        push("Context:\n")
        for i, passage in enumerate(passages, start=1):
            push(f"[{i}] {passage}\n")
        push("\n")
        push(REPROMPT_MARKER, masked=True)
        push("\n\n")
    if template.instruction:
        push(template.instruction, masked=True)
        push("\n\n")
    push("Question: ")
    question_span = (cursor, cursor + len(question))
    push(question)
    push("\nAnswer:")
    push(committed_text)
    return PromptBuild("".join(parts), tuple(boilerplate), question_span)


@dataclass(frozen=True)
class Truncation:
    text: str
    token_count: int
    cut_position: int


def truncate_at(trace: GenerationTrace, trigger_position: int) -> Truncation:
    """Text of the tokens before the trigger; the triggering token is dropped.

    When the trigger lands on a mid-word subword the cut snaps back to the
    start of that word so no partial word survives into the committed text.
    """
    if trigger_position < 0 or trigger_position >= len(trace.tokens):
        raise IndexError(f"trigger position {trigger_position} out of range")
    word = trace.tokens[trigger_position].word_index
    cut = trigger_position
    while cut > 0 and trace.tokens[cut - 1].word_index == word:
        cut -= 1
    return Truncation("".join(t.surface for t in trace.tokens[:cut]), cut, cut)


@dataclass(frozen=True)
class Sentence:
    start: int
    end: int
    complete: bool


def split_sentences(text: str) -> list[Sentence]:
    """Sentence spans: terminator [.?!] followed by whitespace+uppercase or
    end of text, with an abbreviation blocklist. A non-terminated tail becomes
    an incomplete final sentence."""
    boundaries = []
    for m in _SENT_PUNCT_RE.finditer(text):
        end = m.end()
        rest = text[end:]
        if rest.strip():
            follow = re.match(r"\s+(\S)", rest)
            if not (follow and follow.group(1).isupper()):
                continue
        word_start = m.start()
        while word_start > 0 and not text[word_start - 1].isspace():
            word_start -= 1
        if text[word_start:end].casefold() in ABBREVIATIONS:
            continue
        boundaries.append(end)

    sentences = []
    cursor = 0
    for end in boundaries:
        start = cursor
        while start < end and text[start].isspace():
            start += 1
        if start < end:
            sentences.append(Sentence(start, end, True))
        cursor = end
    start = cursor
    while start < len(text) and text[start].isspace():
        start += 1
    if start < len(text):
        sentences.append(Sentence(start, len(text), False))
    return sentences


def _token_spans(trace: GenerationTrace) -> list[tuple[int, int]]:
    spans = []
    offset = 0
    for tok in trace.tokens:
        spans.append((offset, offset + len(tok.surface)))
        offset += len(tok.surface)
    return spans


def _word_start(trace: GenerationTrace, position: int, spans) -> int:
    surface = trace.tokens[position].surface
    return spans[position][0] + (len(surface) - len(surface.lstrip()))


def baseline_trigger(
    kind: str,
    trace: GenerationTrace,
    config: StrategyConfig,
    committed_tokens: int = 0,
    exempt_until: int = 0,
) -> TriggerDecision:
    """Trigger rules for the fixed-rule strategies.

    fl_rag fires at every n-th generated token (counted across rounds),
    fs_rag at the first token after each sentence boundary, flare at the
    first token whose top probability drops below the threshold. Scores are
    1/0 qualifying indicators, aligned with the tokens.
    """
    n = len(trace.tokens)
    qualifying: list[int] = []
    if kind == "fl_rag":
        w = config.n_tokens_window
        qualifying = [p for p in range(n) if (committed_tokens + p + 1) % w == 0]
    elif kind == "fs_rag":
        spans = _token_spans(trace)
        for sent in split_sentences(trace.output_text):
            if not sent.complete:
                continue
            last = next(i for i, (s, e) in enumerate(spans) if s <= sent.end - 1 < e)
            if last + 1 < n:
                qualifying.append(last + 1)
    elif kind == "flare":
        thr = config.flare_prob_threshold
        qualifying = [p for p in range(n) if trace.tokens[p].top_prob < thr]
    else:
        raise ValueError(f"no baseline trigger for strategy {kind!r}")

    scores = tuple(1.0 if p in set(qualifying) else 0.0 for p in range(n))
    for p in qualifying:
        if p >= exempt_until:
            return TriggerDecision(True, p, 1.0, scores)
    return TriggerDecision(False, None, None, scores)


def baseline_query(
    kind: str,
    trace: GenerationTrace,
    trigger: TriggerDecision,
    config: StrategyConfig,
) -> str:
    """Query text for the fixed-rule strategies at a fired trigger."""
    if not trigger.triggered:
        raise ValueError("no trigger fired")
    p = trigger.position
    if kind == "fl_rag":
        start = max(0, p - config.n_tokens_window + 1)
        return "".join(t.surface for t in trace.tokens[start : p + 1]).strip()

    spans = _token_spans(trace)
    sentences = split_sentences(trace.output_text)
    if kind == "fs_rag":
        token_start = spans[p][0]
        done = [s for s in sentences if s.complete and s.end <= token_start]
        if not done:
            raise ValueError("fs_rag trigger without a completed sentence")
        last = max(done, key=lambda s: s.end)
        return trace.output_text[last.start : last.end]
    if kind == "flare":
        anchor = _word_start(trace, p, spans)
        sent = next((s for s in sentences if s.start <= anchor < s.end), sentences[-1])
        kept = [
            trace.tokens[i].surface
            for i, (s, e) in enumerate(spans)
            if s < sent.end and e > sent.start and trace.tokens[i].top_prob >= config.flare_prob_threshold
        ]
        return " ".join("".join(kept).split())
    raise ValueError(f"no baseline query for strategy {kind!r}")


@dataclass
class RoundLog:
    """One retrieval round: where it fired, what was asked, what came back."""

    round_index: int
    trigger_position: int | None
    score: float | None
    query: str | None
    passage_ids: list[str]
    empty: bool

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "trigger_position": self.trigger_position,
            "score": self.score,
            "query": self.query,
            "passage_ids": list(self.passage_ids),
            "empty": self.empty,
        }


@dataclass
class SessionState:
    """Audit state of one question's generation session."""

    strategy_kind: str
    committed_text: str = ""
    committed_token_count: int = 0
    retrieval_count: int = 0
    generate_calls: int = 0
    rounds: list[RoundLog] = field(default_factory=list)
    exhausted: bool = False
    failed: bool = False
    failure: str | None = None
    final_context: str = ""

    def to_dict(self) -> dict:
        return {
            "strategy_kind": self.strategy_kind,
            "committed_text": self.committed_text,
            "committed_token_count": self.committed_token_count,
            "retrieval_count": self.retrieval_count,
            "generate_calls": self.generate_calls,
            "rounds": [r.to_dict() for r in self.rounds],
            "exhausted": self.exhausted,
            "failed": self.failed,
            "failure": self.failure,
        }


def _commit_tail(trace: GenerationTrace, stop_markers) -> tuple[str, int]:
    """Full trace text trimmed at the first stop marker; returns (text, tokens)."""
    text = trace.output_text
    cut = min((text.find(m) for m in stop_markers if m in text), default=-1)
    if cut < 0:
        return text, len(trace.tokens)
    trimmed = text[:cut]
    count = 0
    offset = 0
    for tok in trace.tokens:
        if offset >= cut:
            break
        count += 1
        offset += len(tok.surface)
    return trimmed, count


def _retrieve(index, query: str | None, top_k: int) -> tuple[list[str], list[str]]:
    if index is None or query is None:
        return [], []
    result = bm25.search(index, query, top_k)
    ids = [pid for pid, _ in result.hits]
    texts = [index.get_passage(pid).text for pid in ids]
    return ids, texts


def run_question(
    question: str,
    strategy: StrategyConfig,
    index: bm25.PassageIndex | None,
    gateway,
    template: PromptTemplate = PromptTemplate(),
    stopwords: StopwordSet | None = None,
) -> tuple[str, SessionState]:
    """Run one question end to end and return (answer text, audit state).

    Issues at most max_retrievals_per_question + 1 generation calls. Each
    round re-prompts with the current round's passages only; an empty
    retrieval still counts as a round but adds no Context block. Backend
    failures mark the session failed and return the partial state.
    """
    if strategy.kind != "wo_rag" and index is None:
        raise ValueError(f"strategy {strategy.kind} needs a passage index")
    stopwords = stopwords if stopwords is not None else StopwordSet()

    state = SessionState(strategy_kind=strategy.kind)
    committed = ""
    exempt = 0
    passages: list[str] | None = None
    last_passages: list[str] | None = None

    if strategy.kind == "sr_rag":
        ids, texts = _retrieve(index, question, strategy.top_k)
        state.rounds.append(RoundLog(0, None, None, question, ids, empty=not ids))
        state.retrieval_count = 1
        if not ids:
            logger.warning("sr_rag retrieval found nothing for question %r", question)
        passages = texts

    try:
        while True:
            remaining = strategy.generate_length - state.committed_token_count
            if remaining < 1:
                state.exhausted = True
                break
            last_passages = passages
            build = assemble_prompt(template, question, committed, passages)
            mask_spans = list(build.boilerplate_spans) if strategy.mask_exemplars else []
            if strategy.mask_question:
                mask_spans.append(build.question_span)
            request = GenerateRequest(
                prompt=build.text,
                max_new_tokens=remaining,
                stop_markers=strategy.stop_markers,
                want_attention=strategy.kind == "dragin",
                mask_spans=tuple(mask_spans),
            )
            trace = gateway.generate(request)
            state.generate_calls += 1

            if strategy.kind == "dragin":
                decision = detect(trace, RindConfig(strategy.theta, stopwords), exempt)
            elif strategy.kind in ("fl_rag", "fs_rag", "flare"):
                decision = baseline_trigger(
                    strategy.kind, trace, strategy, state.committed_token_count, exempt
                )
            else:
                decision = TriggerDecision(False, None, None, ())

            if not decision.triggered or state.retrieval_count >= strategy.max_retrievals_per_question:
                if decision.triggered:
                    state.exhausted = True
                tail, tail_tokens = _commit_tail(trace, strategy.stop_markers)
                committed += tail
                state.committed_token_count += tail_tokens
                break

            cut = truncate_at(trace, decision.position)
            committed += cut.text
            state.committed_token_count += cut.token_count

            query = None
            try:
                if strategy.kind == "dragin":
                    query = qfs.render(
                        qfs.formulate(trace, decision.position, strategy.qfs_top_n, stopwords)
                    )
                else:
                    query = baseline_query(strategy.kind, trace, decision, strategy)
            except QueryFormulationError as exc:
                logger.warning("query formulation failed at position %s: %s", decision.position, exc)
            ids, texts = _retrieve(index, query, strategy.top_k)
            if not ids:
                logger.warning("retrieval round %d returned no passages", state.retrieval_count)
            state.rounds.append(
                RoundLog(
                    round_index=len(state.rounds),
                    trigger_position=decision.position,
                    score=decision.score,
                    query=query,
                    passage_ids=ids,
                    empty=not ids,
                )
            )
            state.retrieval_count += 1
            passages = texts
            exempt = 1
    except GatewayError as exc:
        logger.error("backend failure, question marked failed: %s", exc)
        state.failed = True
        state.failure = str(exc)

    state.committed_text = committed
    state.final_context = assemble_prompt(template, question, committed, last_passages).text
    return committed, state
