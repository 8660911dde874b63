"""Greedy decoding with per-token entropy, top probability and attention rows.

The attention row recorded for generated token i is the head-averaged last
layer row of the forward position that produced i's logits, i.e. attention
over every context position strictly before i (prompt first, then generated
0..i-1). Rows therefore have length prompt_len + i and sum to 1.
"""
from __future__ import annotations

import re
import threading
from dataclasses import dataclass

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

TRACE_FORMAT = "trace.v1"
ATTENTION_POLICY = "last_layer_mean"

_WORD_RE = re.compile(r"\S+")


class SidecarError(Exception):
    """Structured failure; ``code`` lands in the HTTP error body."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class SidecarConfig:
    model_path: str
    device: str = "cpu"
    max_context: int = 4096
    attention_policy: str = ATTENTION_POLICY
    greedy: bool = True

    def __post_init__(self):
        if self.attention_policy != ATTENTION_POLICY:
            raise SidecarError(
                "policy_mismatch",
                f"this sidecar only serves {ATTENTION_POLICY!r}, got {self.attention_policy!r}",
            )


@dataclass
class GenerationParams:
    prompt: str
    max_new_tokens: int
    stop_markers: tuple[str, ...] = ()
    want_attention: bool = True
    mask_spans: tuple[tuple[int, int], ...] = ()

    @classmethod
    def from_payload(cls, payload: dict) -> "GenerationParams":
        try:
            prompt = payload["prompt"]
            max_new_tokens = int(payload["max_new_tokens"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SidecarError("bad_request", f"invalid generate payload: {exc}") from exc
        if max_new_tokens < 1:
            raise SidecarError("bad_request", "max_new_tokens must be >= 1")
        return cls(
            prompt=prompt,
            max_new_tokens=max_new_tokens,
            stop_markers=tuple(payload.get("stop_markers") or ()),
            want_attention=bool(payload.get("want_attention", True)),
            mask_spans=tuple((int(a), int(b)) for a, b in payload.get("mask_spans") or ()),
        )


def word_indices(text: str, spans: list[tuple[int, int]]) -> list[int]:
    """Index of the whitespace word containing each token span.

    Whitespace-only tokens attach to the following word; trailing whitespace
    attaches to the last word.
    """
    words = [(m.start(), m.end()) for m in _WORD_RE.finditer(text)]
    out = []
    cursor = 0
    for start, end in spans:
        anchor = start
        while anchor < end and text[anchor].isspace():
            anchor += 1
        if anchor == end:
            anchor = start
        while cursor < len(words) and words[cursor][1] <= anchor:
            cursor += 1
        out.append(min(cursor, max(len(words) - 1, 0)))
    return out


def _mask_flags(text: str, spans: list[tuple[int, int]], mask_spans) -> list[bool]:
    flags = []
    for start, end in spans:
        word_start, word_end = start, end
        while word_start < word_end and text[word_start].isspace():
            word_start += 1
        while word_end > word_start and text[word_end - 1].isspace():
            word_end -= 1
        flags.append(any(word_start < b and a < word_end for a, b in mask_spans))
    return flags


class TraceGenerator:
    """Wraps one causal LM; one in-flight generation at a time."""

    def __init__(self, config: SidecarConfig):
        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model_path)
        self.model = AutoModelForCausalLM.from_pretrained(
            config.model_path, attn_implementation="eager"
        )
        self.model.to(config.device)
        self.model.eval()
        self.vocab_size = int(self.model.config.vocab_size)
        self._lock = threading.Lock()

    def generate(self, params: GenerationParams) -> dict:
        with self._lock:
            return self._generate(params)

    def _prompt_tokens(self, prompt: str, mask_spans):
        enc = self.tokenizer(prompt, return_offsets_mapping=True, add_special_tokens=False)
        ids = enc["input_ids"]
        offsets = enc["offset_mapping"]
        # Glue any offset gaps to the following token so surfaces concatenate
        # back to the prompt byte-for-byte.
        spans = []
        prev_end = 0
        for k, (start, end) in enumerate(offsets):
            end = max(end, prev_end)
            if k == len(offsets) - 1:
                end = len(prompt)
            spans.append((prev_end, end))
            prev_end = end
        surfaces = [prompt[s:e] for s, e in spans]
        return ids, surfaces, spans

    @torch.no_grad()
    def _generate(self, params: GenerationParams) -> dict:
        prompt_ids, prompt_surfaces, prompt_spans = self._prompt_tokens(
            params.prompt, params.mask_spans
        )
        prompt_len = len(prompt_ids)
        if prompt_len == 0:
            raise SidecarError("bad_request", "prompt tokenized to zero tokens")
        if prompt_len + params.max_new_tokens > self.config.max_context:
            raise SidecarError(
                "context_overflow",
                f"prompt ({prompt_len} tokens) + budget exceeds context {self.config.max_context}",
            )

        device = self.config.device
        eos_id = self.model.config.eos_token_id
        step_ids = torch.tensor([prompt_ids], dtype=torch.long, device=device)
        past = None
        generated_ids: list[int] = []
        entropies: list[float] = []
        top_probs: list[float] = []
        rows: list[list[float] | None] = []
        decoded = ""
        surfaces: list[str] = []
        finished = "length_cap"

        for _ in range(params.max_new_tokens):
            out = self.model(
                input_ids=step_ids,
                past_key_values=past,
                use_cache=True,
                output_attentions=params.want_attention,
            )
            logits = out.logits[0, -1].float()
            log_probs = torch.log_softmax(logits, dim=-1)
            probs = log_probs.exp()
            plogp = torch.where(probs > 0, probs * log_probs, torch.zeros_like(probs))
            entropy = float(max(-plogp.sum().item(), 0.0))
            top_prob = float(probs.max().item())
            row = None
            if params.want_attention:
                # [batch, heads, q, kv] -> last query position, mean over heads
                row = out.attentions[-1][0, :, -1, :].float().mean(dim=0).tolist()
            if self.config.greedy:
                next_id = int(torch.argmax(logits).item())
            else:
                next_id = int(torch.multinomial(probs, num_samples=1).item())
            if eos_id is not None and next_id == eos_id:
                finished = "backend_stop"
                break

            generated_ids.append(next_id)
            entropies.append(entropy)
            top_probs.append(top_prob)
            rows.append(row)
            new_decoded = self.tokenizer.decode(generated_ids)
            if not new_decoded.startswith(decoded):
                raise SidecarError(
                    "detokenization_drift",
                    "incremental decode is not prefix-stable for this tokenizer/output",
                )
            surfaces.append(new_decoded[len(decoded):])
            decoded = new_decoded

            if any(marker in decoded for marker in params.stop_markers):
                finished = "end_marker"
                break
            past = out.past_key_values
            step_ids = torch.tensor([[next_id]], dtype=torch.long, device=device)

        output_spans = []
        cursor = 0
        for surface in surfaces:
            output_spans.append((cursor, cursor + len(surface)))
            cursor += len(surface)
        out_word_idx = word_indices(decoded, output_spans)
        prompt_word_idx = word_indices(params.prompt, prompt_spans)
        maskable = _mask_flags(params.prompt, prompt_spans, params.mask_spans)

        tokens = []
        for k, surface in enumerate(surfaces):
            tokens.append(
                {
                    "position": k,
                    "surface": surface,
                    "word_index": out_word_idx[k],
                    "entropy": entropies[k],
                    "top_prob": top_probs[k],
                    "attention_row": rows[k],
                }
            )
        return {
            "format": TRACE_FORMAT,
            "attention_policy": self.config.attention_policy,
            "prompt_len": prompt_len,
            "prompt_text": params.prompt,
            "output_text": decoded,
            "vocab_size": self.vocab_size,
            "finished_reason": finished,
            "prompt_tokens": [
                {"surface": s, "word_index": w, "maskable": m}
                for s, w, m in zip(prompt_surfaces, prompt_word_idx, maskable)
            ],
            "tokens": tokens,
        }
