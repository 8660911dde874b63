"""Dynamic retrieval-augmented generation engine.

Decides during generation when to retrieve (entropy x downstream-attention x
stopword trigger score) and what to retrieve (attention-ranked query over the
full context), retrieves over a BM25 passage index, re-prompts and resumes.
Ships fixed-rule baseline strategies and a QA evaluation harness.
"""

from .bm25 import PassageIndex, RetrievalResult, build_index, load_corpus, search, segment_document
from .gateway import GenerateRequest, HttpBackend, MockBackend, MockScript, open_backend
from .orchestrator import PromptTemplate, SessionState, StrategyConfig, run_question
from .qfs import Query, formulate, render
from .rind import RindConfig, TriggerDecision, detect
from .stopwords import DEFAULT_STOPWORDS, StopwordSet
from .trace import (
    GenerationTrace,
    ProbabilityDistribution,
    PromptToken,
    TokenRecord,
    compute_entropy,
    trace_from_json,
    trace_to_json,
    validate_trace,
    word_of_token,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_STOPWORDS",
    "GenerateRequest",
    "GenerationTrace",
    "HttpBackend",
    "MockBackend",
    "MockScript",
    "PassageIndex",
    "ProbabilityDistribution",
    "PromptTemplate",
    "PromptToken",
    "Query",
    "RetrievalResult",
    "RindConfig",
    "SessionState",
    "StopwordSet",
    "StrategyConfig",
    "TokenRecord",
    "TriggerDecision",
    "build_index",
    "compute_entropy",
    "detect",
    "formulate",
    "load_corpus",
    "open_backend",
    "render",
    "run_question",
    "search",
    "segment_document",
    "trace_from_json",
    "trace_to_json",
    "validate_trace",
    "word_of_token",
]
