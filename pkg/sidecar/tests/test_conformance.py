"""Protocol conformance: every served trace passes the engine's validator and
greedy decoding is deterministic across repeated calls."""
from __future__ import annotations

import math

import pytest
import requests

from dynrag.trace import trace_from_dict

from trace_sidecar.tracing import GenerationParams, SidecarError, word_indices

PROMPTS = [
    "Question: Who directed the film Silver Harbor?\nAnswer:",
    "Question: When did the composer of opera Glass River die?\nAnswer:",
    "Context:\n[1] Some passage text here.\n\nQuestion: Who won?\nAnswer:",
    "A short prompt",
    "Numbers 123 and symbols #$% and\nnewlines\ttabs  spaces",
]


def post(url, payload):
    response = requests.post(url + "/generate", json=payload, timeout=60)
    return response.status_code, response.json()


class TestConformance:
    def test_twenty_requests_validate_and_repeat_identically(self, server_url):
        passed = 0
        for i in range(20):
            payload = {
                "prompt": PROMPTS[i % len(PROMPTS)],
                "max_new_tokens": 4 + (i % 5) * 3,
                "stop_markers": ["Question:"] if i % 3 == 0 else [],
                "want_attention": i % 4 != 3,
                "mask_spans": [[0, 8]] if i % 2 == 0 else [],
            }
            status, body = post(server_url, payload)
            assert status == 200
            trace = trace_from_dict(body, validate=True)

            # Detokenization round-trip, entropy bounds and attention sums are
            # all enforced by the validator; spot-check them explicitly too.
            assert "".join(t.surface for t in trace.tokens) == trace.output_text
            assert "".join(t.surface for t in trace.prompt_tokens) == trace.prompt_text
            for tok in trace.tokens:
                assert 0.0 <= tok.entropy <= math.log(body["vocab_size"]) + 1e-4
                if tok.attention_row is not None:
                    assert abs(sum(tok.attention_row) - 1.0) <= 1e-4

            status_again, body_again = post(server_url, payload)
            assert status_again == 200
            assert body_again == body
            passed += 1
        assert passed == 20

    def test_want_attention_false_omits_rows(self, server_url):
        _, body = post(server_url, {"prompt": "hello there", "max_new_tokens": 3, "want_attention": False})
        assert all(t["attention_row"] is None for t in body["tokens"])

    def test_attention_row_length_tracks_position(self, server_url):
        _, body = post(server_url, {"prompt": "count the rows", "max_new_tokens": 5})
        for tok in body["tokens"]:
            assert len(tok["attention_row"]) == body["prompt_len"] + tok["position"]

    def test_mask_spans_respect_word_boundaries(self, server_url):
        prompt = "Question: Who won the race?"
        _, body = post(server_url, {"prompt": prompt, "max_new_tokens": 2, "mask_spans": [[0, 9]]})
        flags = {}
        offset = 0
        for t in body["prompt_tokens"]:
            flags[offset] = t["maskable"]
            offset += len(t["surface"])
        assert flags[0] is True           # inside "Question:"
        assert flags[len(prompt) - 5] is False  # inside "race?"


class TestHttpErrors:
    def test_context_overflow_is_structured(self, server_url):
        status, body = post(server_url, {"prompt": "x" * 50, "max_new_tokens": 100000})
        assert status == 400
        assert body["error"]["code"] == "context_overflow"

    def test_bad_request(self, server_url):
        status, body = post(server_url, {"prompt": "x", "max_new_tokens": 0})
        assert status == 400
        assert body["error"]["code"] == "bad_request"

    def test_policy_mismatch_refused(self, server_url):
        status, body = post(
            server_url,
            {"prompt": "x", "max_new_tokens": 2, "attention_policy": "first_layer_max"},
        )
        assert status == 400
        assert body["error"]["code"] == "policy_mismatch"

    def test_health_reports_policy(self, server_url):
        body = requests.get(server_url + "/health", timeout=5).json()
        assert body["attention_policy"] == "last_layer_mean"
        assert body["format"] == "trace.v1"


class TestGeneratorInternals:
    def test_stop_marker_ends_generation(self, generator):
        # The tiny model repeats characters; force a marker it will hit.
        probe = generator.generate(GenerationParams(prompt="abc abc abc", max_new_tokens=6))
        if len(probe["output_text"]) >= 2:
            marker = probe["output_text"][:2]
            trace = generator.generate(
                GenerationParams(prompt="abc abc abc", max_new_tokens=6, stop_markers=(marker,))
            )
            assert trace["finished_reason"] == "end_marker"
            assert marker in trace["output_text"]

    def test_word_indices_assignment(self):
        text = " alpha beta  gamma"
        spans = [(0, 3), (3, 6), (6, 11), (11, 14), (14, 18)]
        # " al", "pha", " beta", "  g", "amma"
        assert word_indices(text, spans) == [0, 0, 1, 2, 2]

    def test_word_indices_trailing_whitespace(self):
        text = "word  "
        assert word_indices(text, [(0, 4), (4, 6)]) == [0, 0]

    def test_context_overflow_direct(self, generator):
        with pytest.raises(SidecarError) as err:
            generator.generate(GenerationParams(prompt="y" * 10, max_new_tokens=10_000_000))
        assert err.value.code == "context_overflow"
