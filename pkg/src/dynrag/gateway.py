"""Backend-neutral generate-with-trace contract, plus the scripted mock backend."""
from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field

import requests

from .trace import (
    ATTENTION_POLICY,
    GenerationTrace,
    ProbabilityDistribution,
    PromptToken,
    TokenRecord,
    TraceValidationError,
    compute_entropy,
    trace_from_dict,
    validate_trace,
)

MOCKSCRIPT_FORMAT = "mockscript.v1"
_WORD_RE = re.compile(r"\S+")


class GatewayError(Exception):
    """Base for backend and script failures."""


class BackendUnavailable(GatewayError):
    """Transport failed after bounded retries; the question is marked failed."""


class BackendError(GatewayError):
    """The backend answered with a structured error body."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class MockScriptError(GatewayError):
    """The mock script is malformed or has no entry for a prompt."""


@dataclass(frozen=True)
class GenerateRequest:
    """One generation call: prompt text, budget, stop markers, trace options.

    ``mask_spans`` are character spans of the prompt (typically the few-shot
    exemplar block) whose tokens must not become query-formulation sources.
    """

    prompt: str
    max_new_tokens: int
    stop_markers: tuple[str, ...] = ()
    want_attention: bool = True
    mask_spans: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")

    def to_dict(self) -> dict:
        return {
            "prompt": self.prompt,
            "max_new_tokens": self.max_new_tokens,
            "stop_markers": list(self.stop_markers),
            "want_attention": self.want_attention,
            "mask_spans": [list(span) for span in self.mask_spans],
        }


def tokenize_words(text: str) -> list[tuple[str, int]]:
    """Split text into word tokens whose surfaces concatenate back byte-for-byte.

    Each whitespace-delimited word becomes one token carrying its preceding
    whitespace; trailing whitespace sticks to the last token.
    """
    matches = list(_WORD_RE.finditer(text))
    if not matches:
        return [(text, 0)] if text else []
    tokens = []
    prev_end = 0
    for k, m in enumerate(matches):
        tokens.append((text[prev_end : m.end()], k))
        prev_end = m.end()
    if prev_end < len(text):
        surface, wi = tokens[-1]
        tokens[-1] = (surface + text[prev_end:], wi)
    return tokens


def _maskable_flags(text: str, tokens: list[tuple[str, int]], mask_spans) -> list[bool]:
    flags = []
    offset = 0
    for surface, _ in tokens:
        word_start = offset + (len(surface) - len(surface.lstrip()))
        word_end = offset + len(surface.rstrip())
        masked = any(word_start < end and start < word_end for start, end in mask_spans)
        flags.append(masked)
        offset += len(surface)
    return flags


@dataclass(frozen=True)
class MockStep:
    surface: str
    distribution: ProbabilityDistribution
    attention: dict[int, float] | None  # pinned weights; remainder spread uniformly


@dataclass(frozen=True)
class MockEntry:
    match: str  # "exact" | "prefix"
    prompt: str
    steps: tuple[MockStep, ...]
    finished_reason: str = "backend_stop"


@dataclass
class MockScript:
    """Keyed continuations: prompt matcher -> scripted steps with full
    distributions and attention rows. Exact matches win over prefixes; among
    prefixes the longest one wins."""

    entries: list[MockEntry] = field(default_factory=list)
    vocab_size: int | None = None

    @classmethod
    def load(cls, path) -> "MockScript":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls.from_dict(payload, source=str(path))

    @classmethod
    def from_dict(cls, payload: dict, source: str = "<dict>") -> "MockScript":
        if payload.get("format") != MOCKSCRIPT_FORMAT:
            raise MockScriptError(f"{source}: unsupported script format {payload.get('format')!r}")
        entries = []
        for entry in payload["entries"]:
            if entry.get("match") not in ("exact", "prefix"):
                raise MockScriptError(f"{source}: match must be 'exact' or 'prefix'")
            steps = []
            for step in entry["steps"]:
                attention = step.get("attention")
                if attention is not None and attention != "uniform":
                    attention = {int(pos): float(w) for pos, w in attention.items()}
                elif attention == "uniform":
                    attention = None
                steps.append(
                    MockStep(
                        surface=step["surface"],
                        distribution=ProbabilityDistribution(
                            tuple((item, float(p)) for item, p in step["distribution"])
                        ),
                        attention=attention,
                    )
                )
            if not steps:
                raise MockScriptError(f"{source}: entry with empty steps")
            entries.append(
                MockEntry(
                    match=entry["match"],
                    prompt=entry["prompt"],
                    steps=tuple(steps),
                    finished_reason=entry.get("finished_reason", "backend_stop"),
                )
            )
        return cls(entries=entries, vocab_size=payload.get("vocab_size"))

    def to_dict(self) -> dict:
        return {
            "format": MOCKSCRIPT_FORMAT,
            "vocab_size": self.vocab_size,
            "entries": [
                {
                    "match": e.match,
                    "prompt": e.prompt,
                    "finished_reason": e.finished_reason,
                    "steps": [
                        {
                            "surface": s.surface,
                            "distribution": [[item, p] for item, p in s.distribution.probs],
                            "attention": (
                                {str(pos): w for pos, w in s.attention.items()}
                                if s.attention is not None
                                else None
                            ),
                        }
                        for s in e.steps
                    ],
                }
                for e in self.entries
            ],
        }

    def resolve(self, prompt: str) -> MockEntry:
        for entry in self.entries:
            if entry.match == "exact" and entry.prompt == prompt:
                return entry
        best = None
        for entry in self.entries:
            if entry.match == "prefix" and prompt.startswith(entry.prompt):
                if best is None or len(entry.prompt) > len(best.prompt):
                    best = entry
        if best is None:
            head = prompt[:80].replace("\n", "\\n")
            raise MockScriptError(f"no script entry matches prompt starting {head!r}...")
        return best


def expand_attention_row(pins: dict[int, float] | None, length: int) -> tuple[float, ...]:
    """Turn pinned {position: weight} attention into a full normalized row.

    Unpinned positions share the remaining mass uniformly. Negative positions
    count from the end of the row, so prefix-matched scripts can pin weights
    without knowing the prompt length.
    """
    if length == 0:
        return ()
    row = [0.0] * length
    pinned_mass = 0.0
    pinned_positions = set()
    for pos, weight in (pins or {}).items():
        actual = pos if pos >= 0 else length + pos
        if actual < 0 or actual >= length:
            raise MockScriptError(f"pinned attention position {pos} outside row of length {length}")
        if weight < 0:
            raise MockScriptError(f"pinned attention weight {weight} is negative")
        row[actual] += weight
        pinned_positions.add(actual)
        pinned_mass += weight
    if pinned_mass > 1.0 + 1e-9:
        raise MockScriptError(f"pinned attention mass {pinned_mass} exceeds 1")
    rest = [p for p in range(length) if p not in pinned_positions]
    if rest:
        share = (1.0 - pinned_mass) / len(rest)
        for p in rest:
            row[p] = share
    elif abs(pinned_mass - 1.0) > 1e-9:
        raise MockScriptError("fully pinned attention row does not sum to 1")
    return tuple(row)


class MockBackend:
    """Deterministic scripted backend: a pure function of (script, request)."""

    def __init__(self, script: MockScript):
        self.script = script

    def generate(self, request: GenerateRequest) -> GenerationTrace:
        entry = self.script.resolve(request.prompt)
        prompt_words = tokenize_words(request.prompt)
        flags = _maskable_flags(request.prompt, prompt_words, request.mask_spans)
        prompt_tokens = tuple(
            PromptToken(surface, wi, maskable)
            for (surface, wi), maskable in zip(prompt_words, flags)
        )
        prompt_len = len(prompt_tokens)

        tokens: list[TokenRecord] = []
        text = ""
        finished = entry.finished_reason
        for k, step in enumerate(entry.steps):
            if k >= request.max_new_tokens:
                finished = "length_cap"
                break
            text += step.surface
            attention_row = None
            if request.want_attention:
                attention_row = expand_attention_row(step.attention, prompt_len + k)
            tokens.append(
                TokenRecord(
                    position=k,
                    surface=step.surface,
                    word_index=0,  # fixed up below once the full text is known
                    entropy=compute_entropy(step.distribution),
                    top_prob=step.distribution.top_prob(),
                    attention_row=attention_row,
                    distribution=step.distribution,
                )
            )
            if any(marker in text for marker in request.stop_markers):
                finished = "end_marker"
                break

        word_indices = [wi for _, wi in _word_indices_for_surfaces(text, [t.surface for t in tokens])]
        tokens = [
            TokenRecord(
                position=t.position,
                surface=t.surface,
                word_index=wi,
                entropy=t.entropy,
                top_prob=t.top_prob,
                attention_row=t.attention_row,
                distribution=t.distribution,
            )
            for t, wi in zip(tokens, word_indices)
        ]
        trace = GenerationTrace(
            prompt_len=prompt_len,
            prompt_text=request.prompt,
            output_text=text,
            prompt_tokens=prompt_tokens,
            tokens=tuple(tokens),
            finished_reason=finished,
            attention_policy=ATTENTION_POLICY,
            vocab_size=self.script.vocab_size,
        )
        return validate_trace(trace)


def _word_indices_for_surfaces(text: str, surfaces: list[str]) -> list[tuple[str, int]]:
    """Assign each surface the index of the whitespace word containing it."""
    spans = [(m.start(), m.end()) for m in _WORD_RE.finditer(text)]
    out = []
    offset = 0
    for surface in surfaces:
        start = offset + (len(surface) - len(surface.lstrip()))
        wi = 0
        for idx, (ws, we) in enumerate(spans):
            if ws <= start < we:
                wi = idx
                break
            if start < ws:
                wi = idx  # pure-whitespace surface attaches to the next word
                break
        else:
            wi = max(len(spans) - 1, 0)
        out.append((surface, wi))
        offset += len(surface)
    return out


class HttpBackend:
    """JSON-over-HTTP client for the /generate contract with bounded retries."""

    def __init__(self, url: str, timeout: float = 120.0, retries: int = 3, backoff: float = 0.5):
        self.url = url.rstrip("/")
        if not self.url.endswith("/generate"):
            self.url += "/generate"
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    def generate(self, request: GenerateRequest) -> GenerationTrace:
        last_exc: Exception | None = None
        for attempt in range(self.retries):
            try:
                response = requests.post(self.url, json=request.to_dict(), timeout=self.timeout)
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_exc = exc
                time.sleep(self.backoff * (attempt + 1))
                continue
            if response.status_code != 200:
                try:
                    error = response.json()["error"]
                    raise BackendError(error.get("code", "unknown"), error.get("message", ""))
                except (ValueError, KeyError):
                    raise BackendError("http_error", f"status {response.status_code}")
            payload = response.json()
            if payload.get("attention_policy") != ATTENTION_POLICY:
                raise TraceValidationError(
                    f"backend attention policy {payload.get('attention_policy')!r} "
                    f"does not match engine policy {ATTENTION_POLICY!r}"
                )
            return trace_from_dict(payload, validate=True)
        raise BackendUnavailable(f"backend unreachable after {self.retries} attempts: {last_exc}")


def open_backend(url: str):
    """mock://<script.json> for the scripted backend, http(s)://... for a live one."""
    if url.startswith("mock://"):
        return MockBackend(MockScript.load(url[len("mock://") :]))
    if url.startswith(("http://", "https://")):
        return HttpBackend(url)
    raise ValueError(f"unsupported backend url {url!r}")
