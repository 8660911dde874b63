"""Live smoke: the full dynamic-retrieval strategy driven over the sidecar.

Twenty multihop-format questions against a small fixture corpus must complete
with at least one triggered retrieval and a well-formed report. Answer quality
is model-dependent and not asserted.
"""
from __future__ import annotations

import json

from dynrag.bm25 import build_index, segment_document
from dynrag.evaluation import QAExample, emit_report, run_eval
from dynrag.gateway import HttpBackend
from dynrag.orchestrator import PromptTemplate, StrategyConfig

EXEMPLARS = (
    "Question: When did the director of film Midnight Harbor die?\n"
    "Answer: The film Midnight Harbor was directed by Elena Vasquez."
    " Elena Vasquez died on 3 March 1998. So the answer is 3 March 1998."
)

DOCS = [
    ("Silver Harbor", "Silver Harbor is a film directed by Anna Petrov in 1962."),
    ("Glass River", "Glass River is an opera composed by Tomas Berg."),
    ("Anna Petrov", "Anna Petrov was a director born in 1921. She died in 1988."),
    ("Tomas Berg", "Tomas Berg was a composer born in 1880. He died in 1954."),
    ("Iron Meadow", "Iron Meadow is a novel written by Clara Voss."),
    ("Clara Voss", "Clara Voss was a writer born in 1900."),
    ("Stone Bridge", "Stone Bridge is a film directed by Pavel Novak."),
    ("Pavel Novak", "Pavel Novak was born in 1935 and directed several films."),
]

SUBJECTS = [
    "Silver Harbor", "Glass River", "Iron Meadow", "Stone Bridge", "Midnight Harbor",
    "Red Valley", "Quiet Forest", "Golden Gate", "White Tower", "Green Hill",
    "Blue Lake", "Old Mill", "High Peak", "Deep Well", "Long Road",
    "Broad Street", "Small Pond", "Dark Wood", "Fair Field", "Last Light",
]


def test_dragin_over_sidecar_on_twenty_questions(server_url, tmp_path):
    passages = []
    for title, body in DOCS:
        passages.extend(segment_document(title, body))
    index = build_index(passages)

    examples = [
        QAExample(
            id=f"smoke-{i}",
            question=f"Who directed the film {subject}?",
            gold_answers=("unknown",),
            task_kind="multihop",
        )
        for i, subject in enumerate(SUBJECTS)
    ]
    assert len(examples) == 20

    strategy = StrategyConfig(
        kind="dragin",
        theta=5e-5,
        qfs_top_n=5,
        top_k=2,
        max_retrievals_per_question=2,
        generate_length=12,
    )
    template = PromptTemplate(exemplars=EXEMPLARS)
    backend = HttpBackend(server_url, timeout=120)

    report = run_eval(examples, strategy, index, backend, template)

    agg = report.aggregates()
    assert agg["questions"] == 20
    assert agg["failed"] == 0
    total_retrievals = sum(r.retrieval_count for r in report.results)
    assert total_retrievals >= 1

    # Audit bookkeeping stays coherent for every session.
    for result in report.results:
        assert len(result.state.rounds) == result.retrieval_count
        assert result.state.generate_calls <= strategy.max_retrievals_per_question + 1
        for round_log in result.state.rounds:
            assert round_log.query is None or isinstance(round_log.query, str)

    out = tmp_path / "smoke_report.jsonl"
    emit_report(report, out)
    lines = [json.loads(line) for line in out.read_text().splitlines()]
    assert lines[0]["kind"] == "config"
    assert sum(1 for l in lines if l["kind"] == "question") == 20
    assert lines[-1]["kind"] == "aggregate"
    print(f"[ACCEPTANCE] live smoke: 20 questions, {total_retrievals} retrievals: PASS")
