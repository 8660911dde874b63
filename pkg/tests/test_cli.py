"""End-user command line: index build/search, run, sweep."""
from __future__ import annotations

import json
from pathlib import Path

from dynrag import cli

GOLDEN = Path(__file__).parent / "fixtures" / "golden"


def test_index_build_and_search(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    corpus.write_text(
        json.dumps({"title": "Khan", "text": "Genghis Khan founded the Mongol empire"}) + "\n"
        + json.dumps({"title": "Cahn", "text": "Edward Cahn directed films"}) + "\n",
        encoding="utf-8",
    )
    index_path = tmp_path / "passages.idx"
    assert cli.main(["index", "build", "--corpus", str(corpus), "--out", str(index_path)]) == 0
    assert index_path.exists()

    assert cli.main(["index", "search", "--index", str(index_path), "--query", "genghis khan", "--k", "3", "--json"]) == 0
    hits = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert hits[0]["passage_id"] == "Khan::0000"

    assert cli.main(["index", "search", "--index", str(index_path), "--query", "?!", "--k", "3"]) == 1


def test_run_with_flag_overrides(tmp_path, capsys):
    code = cli.main(
        [
            "run",
            "--config", str(GOLDEN / "run_config.json"),
            "--strategy", "wo_rag",
            "--out", str(tmp_path / "r.jsonl"),
        ]
    )
    assert code == 0
    lines = [json.loads(l) for l in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert lines[-1]["avg_retrievals"] == 0.0


def test_trace_inspection_subcommands(tmp_path, capsys):
    import sys

    sys.path.insert(0, str(Path(__file__).parent))
    from conftest import build_trace, peaked_dist, uniform_dist
    from dynrag.trace import trace_to_json

    trace = build_trace(
        ["who", "asked"],
        [
            {"surface": " Genghis", "dist": uniform_dist(4)},
            {"surface": " Khan", "dist": peaked_dist(), "attention": {2: 0.9}},
        ],
    )
    path = tmp_path / "sample.trace.json"
    path.write_text(trace_to_json(trace), encoding="utf-8")

    assert cli.main(["trace", "scores", "--trace", str(path), "--theta", "1.0"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "position,surface,entropy,a_max,s,score"
    assert len(out.splitlines()) == 3

    scores_csv = tmp_path / "scores.csv"
    assert cli.main(["trace", "scores", "--trace", str(path), "--out", str(scores_csv)]) == 0
    assert scores_csv.read_text().startswith("position,surface")

    assert cli.main(["trace", "query", "--trace", str(path), "--position", "1", "--top-n", "2"]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "position,word,attention,selected"


def test_sweep_grid_shape(tmp_path, capsys):
    code = cli.main(
        [
            "sweep",
            "--config", str(GOLDEN / "run_config.json"),
            "--theta", "1.0:1.2:0.2",
            "--out", str(tmp_path / "sweep.json"),
        ]
    )
    assert code == 0
    rows = json.loads((tmp_path / "sweep.json").read_text())
    assert [row["theta"] for row in rows] == [1.0, 1.2]
    assert {"em", "f1", "precision", "recall", "avg_retrievals", "avg_generated_tokens"} <= set(rows[0])
    # Raising theta can only reduce how often retrieval fires.
    assert rows[0]["avg_retrievals"] >= rows[1]["avg_retrievals"]
    table = capsys.readouterr().out
    assert "theta" in table and "#Num" in table
