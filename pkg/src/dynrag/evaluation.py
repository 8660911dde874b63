"""Dataset loading, answer extraction, EM/F1 scoring and run reports."""
from __future__ import annotations

import hashlib
import json
import logging
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from .gateway import GatewayError, GenerateRequest
from .orchestrator import PromptTemplate, SessionState, StrategyConfig, run_question
from .stopwords import StopwordSet

logger = logging.getLogger("dynrag.evaluation")

ANSWER_MARKER = "So the answer is"
TASK_KINDS = ("multihop", "reading_comprehension", "commonsense_yesno")

_ARTICLES = ("a", "an", "the")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class DatasetError(ValueError):
    """A dataset record failed validation; the message names the line."""


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    gold_answers: tuple[str, ...]
    task_kind: str


def load_dataset(path, task_kind: str) -> list[QAExample]:
    """Read a JSONL dataset of {"id", "question", "answer"|"answers"} records.

    Examples flagged unanswerable (or with no usable gold answer) are dropped.
    """
    if task_kind not in TASK_KINDS:
        raise DatasetError(f"unknown task kind {task_kind!r}")
    examples: list[QAExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}: invalid JSON at line {lineno}: {exc}") from exc
            if record.get("unanswerable"):
                continue
            try:
                qid = str(record["id"])
                question = record["question"]
            except KeyError as exc:
                raise DatasetError(f"{path}: record at line {lineno} missing {exc}") from exc
            golds = record.get("answers", record.get("answer"))
            if isinstance(golds, str):
                golds = [golds]
            if not golds:
                continue
            if not isinstance(question, str):
                raise DatasetError(f"{path}: record at line {lineno} has a non-string question")
            examples.append(QAExample(qid, question, tuple(str(g) for g in golds), task_kind))
    return examples


def normalize(answer: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace, drop a leading article."""
    words = answer.lower().translate(_PUNCT_TABLE).split()
    if words and words[0] in _ARTICLES:
        words = words[1:]
    return " ".join(words)


def exact_match(answer: str, golds) -> int:
    normalized = normalize(answer)
    return int(any(normalized == normalize(g) for g in golds))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> tuple[float, float, float]:
    if not pred_tokens and not gold_tokens:
        return 1.0, 1.0, 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0, 0.0, 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0, 0.0, 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall), precision, recall


def token_f1(answer: str, golds) -> tuple[float, float, float]:
    """Token-multiset (f1, precision, recall) against the best-scoring gold."""
    pred_tokens = normalize(answer).split()
    if not golds:
        return 0.0, 0.0, 0.0
    return max(_f1_single(pred_tokens, normalize(g).split()) for g in golds)


def extract_answer(generated_text: str, gateway, prompt: str, max_new_tokens: int = 32) -> str:
    """Final answer: text after the last answer marker, trailing punctuation
    stripped. Without a marker, the marker is appended to the model's output
    and one more bounded generation supplies the answer."""
    if ANSWER_MARKER in generated_text:
        tail = generated_text.rsplit(ANSWER_MARKER, 1)[1]
        return tail.strip().rstrip(string.punctuation + " \t\n")
    try:
        trace = gateway.generate(
            GenerateRequest(
                prompt=prompt + " " + ANSWER_MARKER,
                max_new_tokens=max_new_tokens,
                stop_markers=("\n",),
                want_attention=False,
            )
        )
    except GatewayError as exc:
        logger.warning("answer re-prompt failed: %s", exc)
        return ""
    answer = trace.output_text.strip().rstrip(string.punctuation + " \t\n")
    if not answer:
        logger.warning("answer re-prompt produced no usable answer")
    return answer


@dataclass
class QuestionResult:
    id: str
    question: str
    answer: str
    gold_answers: tuple[str, ...]
    em: int
    f1: float
    precision: float
    recall: float
    retrieval_count: int
    generated_tokens: int
    failed: bool
    state: SessionState

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "answer": self.answer,
            "gold_answers": list(self.gold_answers),
            "em": self.em,
            "f1": self.f1,
            "precision": self.precision,
            "recall": self.recall,
            "retrieval_count": self.retrieval_count,
            "generated_tokens": self.generated_tokens,
            "failed": self.failed,
        }


@dataclass
class RunReport:
    """Per-question records plus arithmetic-mean aggregates for one run."""

    config_fingerprint: str
    task_kind: str
    results: list[QuestionResult] = field(default_factory=list)

    def aggregates(self) -> dict:
        n = len(self.results)
        if n == 0:
            return {"questions": 0}
        agg = {
            "questions": n,
            "em": sum(r.em for r in self.results) / n,
            "f1": sum(r.f1 for r in self.results) / n,
            "precision": sum(r.precision for r in self.results) / n,
            "recall": sum(r.recall for r in self.results) / n,
            "avg_retrievals": sum(r.retrieval_count for r in self.results) / n,
            "avg_generated_tokens": sum(r.generated_tokens for r in self.results) / n,
            "failed": sum(1 for r in self.results if r.failed),
        }
        if self.task_kind == "commonsense_yesno":
            agg["accuracy"] = agg["em"]
        return agg


def config_fingerprint(strategy: StrategyConfig, extras: dict | None = None) -> str:
    payload = {"strategy": strategy.to_dict(), "extras": extras or {}}
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()
    return digest[:16]


def score_answer(answer: str, example: QAExample) -> tuple[int, float, float, float]:
    em = exact_match(answer, example.gold_answers)
    f1, precision, recall = token_f1(answer, example.gold_answers)
    return em, f1, precision, recall


def evaluate_question(
    example: QAExample,
    strategy: StrategyConfig,
    index,
    gateway,
    template: PromptTemplate,
    stopwords: StopwordSet,
) -> QuestionResult:
    raw, state = run_question(example.question, strategy, index, gateway, template, stopwords)
    answer = "" if state.failed else extract_answer(raw, gateway, state.final_context)
    em, f1, precision, recall = score_answer(answer, example)
    return QuestionResult(
        id=example.id,
        question=example.question,
        answer=answer,
        gold_answers=example.gold_answers,
        em=em,
        f1=f1,
        precision=precision,
        recall=recall,
        retrieval_count=state.retrieval_count,
        generated_tokens=state.committed_token_count,
        failed=state.failed,
        state=state,
    )


def run_eval(
    examples: list[QAExample],
    strategy: StrategyConfig,
    index,
    gateway,
    template: PromptTemplate = PromptTemplate(),
    stopwords: StopwordSet | None = None,
    workers: int = 1,
    fingerprint_extras: dict | None = None,
) -> RunReport:
    """Evaluate a dataset; results keep dataset order regardless of workers."""
    stopwords = stopwords if stopwords is not None else StopwordSet()
    task_kind = examples[0].task_kind if examples else "multihop"
    report = RunReport(
        config_fingerprint=config_fingerprint(strategy, fingerprint_extras),
        task_kind=task_kind,
    )

    def one(example: QAExample) -> QuestionResult:
        return evaluate_question(example, strategy, index, gateway, template, stopwords)

    if workers <= 1:
        report.results = [one(e) for e in examples]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            report.results = list(pool.map(one, examples))
    return report


def emit_report(report: RunReport, path) -> None:
    """Write the report as JSONL: a config line, question lines, an aggregate line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {"kind": "config", "fingerprint": report.config_fingerprint, "task_kind": report.task_kind},
                sort_keys=True,
            )
            + "\n"
        )
        for result in report.results:
            fh.write(json.dumps({"kind": "question", **result.to_dict()}, sort_keys=True) + "\n")
        fh.write(json.dumps({"kind": "aggregate", **report.aggregates()}, sort_keys=True) + "\n")


def emit_audit_log(report: RunReport, path) -> None:
    """Per-question JSONL audit: rounds, queries, passage ids, final answer."""
    with open(path, "w", encoding="utf-8") as fh:
        for result in report.results:
            fh.write(
                json.dumps(
                    {"id": result.id, "answer": result.answer, **result.state.to_dict()},
                    sort_keys=True,
                )
                + "\n"
            )


def summary_table(report: RunReport) -> str:
    agg = report.aggregates()
    lines = [
        f"questions      {agg.get('questions', 0)}",
        f"EM             {agg.get('em', 0.0):.4f}",
        f"F1             {agg.get('f1', 0.0):.4f}",
        f"precision      {agg.get('precision', 0.0):.4f}",
        f"recall         {agg.get('recall', 0.0):.4f}",
        f"avg retrievals {agg.get('avg_retrievals', 0.0):.3f}",
        f"avg tokens     {agg.get('avg_generated_tokens', 0.0):.2f}",
        f"failed         {agg.get('failed', 0)}",
    ]
    if "accuracy" in agg:
        lines.insert(2, f"accuracy       {agg['accuracy']:.4f}")
    return "\n".join(lines) + "\n"


def sweep_thetas(
    examples: list[QAExample],
    base_strategy: StrategyConfig,
    thetas: list[float],
    index,
    gateway,
    template: PromptTemplate = PromptTemplate(),
    stopwords: StopwordSet | None = None,
    workers: int = 1,
) -> list[dict]:
    """Re-run the dataset at each threshold; one grid row per theta."""
    rows = []
    for theta in thetas:
        strategy = replace(base_strategy, theta=theta)
        report = run_eval(examples, strategy, index, gateway, template, stopwords, workers)
        agg = report.aggregates()
        rows.append(
            {
                "theta": theta,
                "em": agg.get("em", 0.0),
                "f1": agg.get("f1", 0.0),
                "precision": agg.get("precision", 0.0),
                "recall": agg.get("recall", 0.0),
                "avg_retrievals": agg.get("avg_retrievals", 0.0),
                "avg_generated_tokens": agg.get("avg_generated_tokens", 0.0),
            }
        )
    return rows
