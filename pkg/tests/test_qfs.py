"""Query formulation: ranking, ordering, dedupe, masking, rendering."""
from __future__ import annotations

import pytest

import oracles
from conftest import build_trace, peaked_dist, random_trace, uniform_dist
from dynrag.qfs import Query, QueryFormulationError, explain, formulate, render
from dynrag.trace import context_word_key


def attention_fixture():
    # Context words: prompt ["film", "Morayta", "died"], one generated token
    # then the trigger token whose row drives selection.
    return build_trace(
        ["film", "Morayta", "died"],
        [
            {"surface": " in", "dist": peaked_dist(), "attention": [0.2, 0.5, 0.3]},
            {"surface": " 1999", "dist": uniform_dist(4), "attention": [0.1, 0.6, 0.25, 0.05]},
        ],
    )


class TestFormulate:
    def test_top_n_in_original_order(self, stopwords):
        # Row [0.1, 0.6, 0.25, 0.05]: ranked Morayta (0.6), died (0.25), film (0.1).
        # Top-2 are Morayta and died, emitted in text order.
        query = formulate(attention_fixture(), 1, 2, stopwords)
        assert query.words == ("Morayta", "died")
        assert query.source_positions == (1, 2)

    def test_oracle_agrees_on_fixture(self, stopwords):
        words, positions = oracles.qfs_words(attention_fixture(), 1, 2, stopwords)
        assert words == ["Morayta", "died"]
        assert positions == [1, 2]

    def test_saturation_returns_all_content_words(self, stopwords):
        query = formulate(attention_fixture(), 1, 50, stopwords)
        assert query.words == ("film", "Morayta", "died")
        assert len(query.words) <= 50

    def test_subword_tokens_dedupe_to_one_word(self, stopwords):
        # Both subword tokens of "Hypocrite" outrank everything else; the word
        # appears once and the next-ranked word fills the second slot.
        trace = build_trace(
            ["the", "script"],
            [
                {"surface": " Hypo", "dist": peaked_dist(), "attention": [0.5, 0.5]},
                {"surface": "crite", "dist": peaked_dist(), "attention": [0.4, 0.3, 0.3]},
                {
                    "surface": " bows",
                    "dist": uniform_dist(4),
                    "attention": [0.02, 0.08, 0.5, 0.4],
                },
            ],
        )
        query = formulate(trace, 2, 2, stopwords)
        assert query.words == ("script", "Hypocrite")
        oracle_words, _ = oracles.qfs_words(trace, 2, 2, stopwords)
        assert list(query.words) == oracle_words

    def test_stopwords_skipped_during_selection(self, stopwords):
        trace = build_trace(
            ["the", "of", "Khan"],
            [{"surface": " rode", "dist": uniform_dist(4), "attention": [0.5, 0.3, 0.2]}],
        )
        query = formulate(trace, 0, 1, stopwords)
        assert query.words == ("Khan",)

    def test_masked_prompt_positions_skipped(self, stopwords):
        trace = build_trace(
            ["exemplar", "Khan"],
            [{"surface": " rode", "dist": uniform_dist(4), "attention": [0.9, 0.1]}],
            maskable={0},
        )
        assert formulate(trace, 0, 1, stopwords).words == ("Khan",)
        assert formulate(trace, 0, 1, stopwords, mask_prompt_regions=False).words == ("exemplar",)

    def test_ties_break_toward_earlier_position(self, stopwords):
        trace = build_trace(
            ["Khan", "Morayta"],
            [{"surface": " rode", "dist": uniform_dist(4), "attention": [0.5, 0.5]}],
        )
        assert formulate(trace, 0, 1, stopwords).words == ("Khan",)

    def test_all_stopword_context_is_an_error(self, stopwords):
        trace = build_trace(
            ["the", "of"],
            [{"surface": " and", "dist": uniform_dist(4), "attention": [0.6, 0.4]}],
        )
        with pytest.raises(QueryFormulationError):
            formulate(trace, 0, 3, stopwords)

    def test_empty_context_is_an_error(self, stopwords):
        trace = build_trace(
            [],
            [{"surface": "Khan", "dist": uniform_dist(4), "attention": []}],
        )
        with pytest.raises(QueryFormulationError):
            formulate(trace, 0, 1, stopwords)

    def test_n_must_be_positive(self, stopwords):
        with pytest.raises(ValueError):
            formulate(attention_fixture(), 1, 0, stopwords)


class TestRender:
    def test_joins_with_single_spaces(self):
        assert render(Query(("Morayta", "died"), (1, 2), 2)) == "Morayta died"

    def test_single_word(self):
        assert render(Query(("Khan",), (0,), 1)) == "Khan"


class TestProperties:
    def test_order_preservation_and_monotone_inclusion(self, stopwords, rng):
        checked = 0
        for _ in range(150):
            trace = random_trace(rng, mask_some=True)
            position = rng.randrange(len(trace.tokens))
            if trace.prompt_len + position == 0:
                continue
            try:
                smaller = formulate(trace, position, 3, stopwords)
                larger = formulate(trace, position, 4, stopwords)
            except QueryFormulationError:
                continue
            checked += 1
            assert list(smaller.source_positions) == sorted(smaller.source_positions)
            keys_small = {context_word_key(trace, p) for p in smaller.source_positions}
            keys_large = {context_word_key(trace, p) for p in larger.source_positions}
            assert keys_small <= keys_large
            oracle_words, oracle_positions = oracles.qfs_words(trace, position, 3, stopwords)
            assert list(smaller.words) == oracle_words
            assert list(smaller.source_positions) == oracle_positions
        assert checked >= 100

    def test_no_duplicate_words_ever(self, stopwords, rng):
        for _ in range(100):
            trace = random_trace(rng)
            position = rng.randrange(len(trace.tokens))
            if trace.prompt_len + position == 0:
                continue
            try:
                query = formulate(trace, position, 5, stopwords)
            except QueryFormulationError:
                continue
            keys = [context_word_key(trace, p) for p in query.source_positions]
            assert len(keys) == len(set(keys))
            assert len(query.words) <= 5


class TestExplain:
    def test_rows_cover_every_context_position(self, stopwords):
        trace = attention_fixture()
        rows = explain(trace, 1, 2, stopwords)
        assert len(rows) == 4
        selected = [pos for pos, _, _, sel in rows if sel]
        assert selected == [1, 2]
