"""Command line entry points: index build/search, evaluation runs, theta sweeps."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import bm25
from .evaluation import emit_audit_log, emit_report, load_dataset, run_eval, summary_table, sweep_thetas
from .gateway import open_backend
from .orchestrator import PromptTemplate, StrategyConfig
from .stopwords import DEFAULT_STOPWORDS


def _parse_theta_range(text: str) -> list[float]:
    """'1.0:1.4:0.1' -> [1.0, 1.1, 1.2, 1.3, 1.4]; a single number is itself."""
    if ":" not in text:
        return [float(text)]
    start, end, step = (float(x) for x in text.split(":"))
    values = []
    v = start
    while v <= end + 1e-9:
        values.append(round(v, 10))
        v += step
    return values


def _load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        config = json.load(fh)
    base = Path(path).parent
    for key in ("dataset_path", "corpus", "index", "exemplars", "report_out", "audit_out", "summary_out"):
        if config.get(key) and not os.path.isabs(config[key]):
            config[key] = str((base / config[key]).resolve())
    backend = config.get("backend", "")
    if backend.startswith("mock://") and not os.path.isabs(backend[len("mock://") :]):
        config["backend"] = "mock://" + str((base / backend[len("mock://") :]).resolve())
    return config


def _float_or_inf(text: str) -> float:
    return float(text)


def _strategy_from_args(args, config: dict) -> StrategyConfig:
    strategy_cfg = dict(config.get("strategy", {}))
    if args.strategy:
        strategy_cfg["kind"] = args.strategy
    if getattr(args, "theta", None) is not None:
        strategy_cfg["theta"] = args.theta
    if args.top_n is not None:
        strategy_cfg["qfs_top_n"] = args.top_n
    if args.k is not None:
        strategy_cfg["top_k"] = args.k
    if args.flare_threshold is not None:
        strategy_cfg["flare_prob_threshold"] = args.flare_threshold
    if args.window is not None:
        strategy_cfg["n_tokens_window"] = args.window
    if args.generate_length is not None:
        strategy_cfg["generate_length"] = args.generate_length
    if args.max_retrievals is not None:
        strategy_cfg["max_retrievals_per_question"] = args.max_retrievals
    if "theta" in strategy_cfg and isinstance(strategy_cfg["theta"], str):
        strategy_cfg["theta"] = float(strategy_cfg["theta"])
    if "stop_markers" in strategy_cfg:
        strategy_cfg["stop_markers"] = tuple(strategy_cfg["stop_markers"])
    return StrategyConfig(**strategy_cfg)


def _template_from(config: dict, args) -> PromptTemplate:
    exemplars = ""
    path = args.exemplars or config.get("exemplars")
    if path:
        exemplars = Path(path).read_text(encoding="utf-8").rstrip("\n")
    return PromptTemplate(exemplars=exemplars, instruction=config.get("instruction"))


def _build_or_load_index(config: dict, args):
    index_path = args.index or config.get("index")
    if index_path and Path(index_path).exists():
        try:
            return bm25.load_index(index_path)
        except bm25.IndexFileError as exc:
            print(f"warning: {exc}", file=sys.stderr)
    corpus = args.corpus or config.get("corpus")
    if not corpus:
        return None
    index = bm25.build_index(bm25.load_corpus(corpus))
    if index_path:
        bm25.save_index(index, index_path)
    return index


def _add_run_flags(parser, theta_is_range=False):
    parser.add_argument("--config", help="JSON run config; flags override its values")
    parser.add_argument("--dataset", help="dataset JSONL path")
    parser.add_argument("--task", choices=("multihop", "reading_comprehension", "commonsense_yesno"))
    parser.add_argument("--strategy", choices=("wo_rag", "sr_rag", "fl_rag", "fs_rag", "flare", "dragin"))
    if theta_is_range:
        parser.add_argument("--theta", dest="theta_range", required=True, metavar="START:END:STEP")
    else:
        parser.add_argument("--theta", type=_float_or_inf)
    parser.add_argument("--top-n", type=int, dest="top_n")
    parser.add_argument("--k", type=int)
    parser.add_argument("--flare-threshold", type=float, dest="flare_threshold")
    parser.add_argument("--window", type=int)
    parser.add_argument("--generate-length", type=int, dest="generate_length")
    parser.add_argument("--max-retrievals", type=int, dest="max_retrievals")
    parser.add_argument("--backend", help="mock://script.json or http://host:port")
    parser.add_argument("--corpus", help="corpus JSONL (builds an index)")
    parser.add_argument("--index", help="index file to load or write")
    parser.add_argument("--exemplars", help="few-shot exemplars text file")
    parser.add_argument("--out", help="report JSONL path")
    parser.add_argument("--audit", help="audit log JSONL path")
    parser.add_argument("--summary", help="summary table path (stdout otherwise)")
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument("--strict", action="store_true", help="exit nonzero if any question failed")


def _run_common(args):
    config = _load_config(args.config) if args.config else {}
    dataset_path = args.dataset or config.get("dataset_path") or (config.get("dataset") or {}).get("path")
    task_kind = args.task or config.get("task_kind") or (config.get("dataset") or {}).get("task_kind")
    if not dataset_path or not task_kind:
        print("error: a dataset path and task kind are required", file=sys.stderr)
        raise SystemExit(2)
    backend_url = args.backend or config.get("backend") or os.environ.get("DYNRAG_BACKEND")
    if not backend_url:
        print("error: no backend url (flag, config, or DYNRAG_BACKEND)", file=sys.stderr)
        raise SystemExit(2)
    examples = load_dataset(dataset_path, task_kind)
    strategy = _strategy_from_args(args, config)
    template = _template_from(config, args)
    gateway = open_backend(backend_url)
    index = _build_or_load_index(config, args)
    workers = args.workers if args.workers is not None else int(config.get("workers", 1))
    extras = {"dataset": Path(dataset_path).name, "task_kind": task_kind}
    return config, examples, strategy, template, gateway, index, workers, extras


def cmd_run(args) -> int:
    config, examples, strategy, template, gateway, index, workers, extras = _run_common(args)
    report = run_eval(
        examples, strategy, index, gateway, template, DEFAULT_STOPWORDS, workers, fingerprint_extras=extras
    )
    out = args.out or config.get("report_out")
    if out:
        emit_report(report, out)
    audit = args.audit or config.get("audit_out")
    if audit:
        emit_audit_log(report, audit)
    table = summary_table(report)
    summary_path = args.summary or config.get("summary_out")
    if summary_path:
        Path(summary_path).write_text(table, encoding="utf-8")
    else:
        print(table, end="")
    failed = report.aggregates().get("failed", 0)
    return 1 if (args.strict and failed) else 0


def cmd_sweep(args) -> int:
    thetas = _parse_theta_range(args.theta_range)
    args.theta = thetas[0]  # seed the base strategy; the grid replaces it per run
    config, examples, strategy, template, gateway, index, workers, _ = _run_common(args)
    rows = sweep_thetas(examples, strategy, thetas, index, gateway, template, DEFAULT_STOPWORDS, workers)
    header = f"{'theta':>6}  {'EM':>6}  {'F1':>6}  {'Prec':>6}  {'Rec':>6}  {'#Num':>6}  {'Tokens':>7}"
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['theta']:>6.2f}  {row['em']:>6.3f}  {row['f1']:>6.4f}  {row['precision']:>6.4f}"
            f"  {row['recall']:>6.4f}  {row['avg_retrievals']:>6.3f}  {row['avg_generated_tokens']:>7.2f}"
        )
    table = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(table, end="")
    return 0


def cmd_trace_scores(args) -> int:
    from .rind import SCORE_DUMP_COLUMNS, RindConfig, dump_scores_csv, score_table
    from .trace import trace_from_json

    trace = trace_from_json(Path(args.trace).read_text(encoding="utf-8"))
    config = RindConfig(args.theta, DEFAULT_STOPWORDS)
    if args.out:
        dump_scores_csv(trace, config, args.out)
        return 0
    print(",".join(SCORE_DUMP_COLUMNS))
    for row in score_table(trace, config):
        print(",".join(repr(v) if isinstance(v, str) else str(v) for v in row))
    return 0


def cmd_trace_query(args) -> int:
    from .qfs import EXPLAIN_COLUMNS, dump_explain_csv, explain
    from .trace import trace_from_json

    trace = trace_from_json(Path(args.trace).read_text(encoding="utf-8"))
    rows = explain(trace, args.position, args.top_n, DEFAULT_STOPWORDS)
    if args.out:
        dump_explain_csv(rows, args.out)
        return 0
    print(",".join(EXPLAIN_COLUMNS))
    for row in rows:
        print(",".join(repr(v) if isinstance(v, str) else str(v) for v in row))
    return 0


def cmd_index_build(args) -> int:
    passages = bm25.load_corpus(args.corpus, segment_size=args.segment_size)
    index = bm25.build_index(passages, k1=args.k1, b=args.b, segment_size=args.segment_size)
    bm25.save_index(index, args.out)
    print(f"indexed {index.doc_count} passages (avg length {index.avg_doc_length:.1f}) -> {args.out}")
    return 0


def cmd_index_search(args) -> int:
    index = bm25.load_index(args.index)
    result = bm25.search(index, args.query, args.k)
    if result.status == "no_query_terms":
        print("query normalized to zero terms", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps([{"passage_id": pid, "score": score} for pid, score in result.hits]))
    else:
        for pid, score in result.hits:
            print(f"{score:10.4f}  {pid}")
        if not result.hits:
            print("no hits")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dynrag", description=__doc__)
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="evaluate a dataset with one strategy")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the dragin strategy across a theta grid")
    _add_run_flags(p_sweep, theta_is_range=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_index = sub.add_parser("index", help="build or query a BM25 passage index")
    index_sub = p_index.add_subparsers(dest="index_command", required=True)
    p_build = index_sub.add_parser("build")
    p_build.add_argument("--corpus", required=True)
    p_build.add_argument("--out", required=True)
    p_build.add_argument("--segment-size", type=int, default=bm25.DEFAULT_SEGMENT_SIZE)
    p_build.add_argument("--k1", type=float, default=bm25.DEFAULT_K1)
    p_build.add_argument("--b", type=float, default=bm25.DEFAULT_B)
    p_build.set_defaults(func=cmd_index_build)
    p_search = index_sub.add_parser("search")
    p_search.add_argument("--index", required=True)
    p_search.add_argument("--query", required=True)
    p_search.add_argument("--k", type=int, default=3)
    p_search.add_argument("--json", action="store_true")
    p_search.set_defaults(func=cmd_index_search)

    p_trace = sub.add_parser("trace", help="inspect a serialized .trace.json file")
    trace_sub = p_trace.add_subparsers(dest="trace_command", required=True)
    p_scores = trace_sub.add_parser("scores", help="per-token trigger score table")
    p_scores.add_argument("--trace", required=True)
    p_scores.add_argument("--theta", type=float, default=1.0)
    p_scores.add_argument("--out", help="write CSV here instead of stdout")
    p_scores.set_defaults(func=cmd_trace_scores)
    p_query = trace_sub.add_parser("query", help="attention ranking behind a query formulation")
    p_query.add_argument("--trace", required=True)
    p_query.add_argument("--position", type=int, required=True)
    p_query.add_argument("--top-n", type=int, dest="top_n", default=3)
    p_query.add_argument("--out", help="write CSV here instead of stdout")
    p_query.set_defaults(func=cmd_trace_query)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
