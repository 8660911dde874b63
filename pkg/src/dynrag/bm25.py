"""Passage segmentation and a BM25 inverted index with Lucene-style idf."""
from __future__ import annotations

import json
import math
import re
import struct
import zlib
from collections import Counter
from dataclasses import dataclass

DEFAULT_K1 = 0.9
DEFAULT_B = 0.4
DEFAULT_SEGMENT_SIZE = 100

INDEX_MAGIC = b"BM25IDX\x00"
INDEX_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9]+")


class CorpusError(ValueError):
    """Bad corpus input (duplicate ids, malformed records, oversized passages)."""


class IndexFileError(ValueError):
    """Index file unreadable or from a different format version; rebuild."""


def analyze(text: str) -> list[str]:
    """Case-fold and split on non-alphanumerics; no stemming, no stopword removal."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Passage:
    passage_id: str
    source_doc: str
    text: str
    token_count: int


@dataclass(frozen=True)
class RetrievalResult:
    """Ranked hits for one query; ``status`` separates an unusable query
    ("no_query_terms") from a usable one that simply matched nothing ("ok")."""

    hits: tuple[tuple[str, float], ...]
    query_terms_used: tuple[str, ...]
    status: str = "ok"


def segment_document(title: str, body: str, segment_size: int = DEFAULT_SEGMENT_SIZE) -> list[Passage]:
    """Greedy split into consecutive spans of ``segment_size`` whitespace tokens.

    The final remainder is kept as its own passage; no token is lost or
    duplicated. An empty body yields no passages.
    """
    words = body.split()
    if not words:
        return []
    passages = []
    for start in range(0, len(words), segment_size):
        chunk = words[start : start + segment_size]
        passages.append(
            Passage(
                passage_id=f"{title}::{start // segment_size:04d}",
                source_doc=title,
                text=" ".join(chunk),
                token_count=len(chunk),
            )
        )
    return passages


def load_corpus(path, segment_size: int = DEFAULT_SEGMENT_SIZE) -> list[Passage]:
    """Read a JSONL corpus of {"title", "text"} documents and segment each one."""
    passages: list[Passage] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                title, text = record["title"], record["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}: malformed corpus record at line {lineno}: {exc}") from exc
            passages.extend(segment_document(title, text, segment_size))
    return passages


class PassageIndex:
    """Immutable-after-build inverted index scoring with BM25.

    Scoring: idf * tf*(k1+1) / (tf + k1*(1 - b + b*len/avglen)) with
    idf = ln((N - df + 0.5)/(df + 0.5) + 1), summed over query tokens
    (repeated query tokens count each occurrence).
    """

    def __init__(self, k1: float = DEFAULT_K1, b: float = DEFAULT_B):
        self.k1 = k1
        self.b = b
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_lengths: dict[str, int] = {}
        self.passages: dict[str, Passage] = {}
        self.avg_doc_length = 0.0
        self.doc_count = 0

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.doc_count - df + 0.5) / (df + 0.5) + 1.0)

    def get_passage(self, passage_id: str) -> Passage:
        return self.passages[passage_id]


def build_index(
    passages: list[Passage],
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
    segment_size: int = DEFAULT_SEGMENT_SIZE,
) -> PassageIndex:
    """Build the inverted index; idempotent for identical input."""
    if not passages:
        raise CorpusError("cannot build an index over an empty passage list")
    slack_cap = math.ceil(segment_size * 1.2)
    index = PassageIndex(k1=k1, b=b)
    postings: dict[str, dict[str, int]] = {}
    for passage in passages:
        if not passage.text:
            raise CorpusError(f"passage {passage.passage_id!r} has empty text")
        if passage.passage_id in index.passages:
            raise CorpusError(f"duplicate passage_id {passage.passage_id!r}")
        if passage.token_count > slack_cap:
            raise CorpusError(
                f"passage {passage.passage_id!r} has {passage.token_count} tokens, cap {slack_cap}"
            )
        terms = analyze(passage.text)
        index.passages[passage.passage_id] = passage
        index.doc_lengths[passage.passage_id] = len(terms)
        for term, tf in Counter(terms).items():
            postings.setdefault(term, {})[passage.passage_id] = tf
    index.doc_count = len(index.passages)
    index.avg_doc_length = sum(index.doc_lengths.values()) / index.doc_count
    index.postings = {
        term: sorted(by_doc.items()) for term, by_doc in sorted(postings.items())
    }
    return index


def search(index: PassageIndex, query: str, k: int) -> RetrievalResult:
    """Top-k passages by BM25 score; ties broken toward the smaller passage_id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    terms = analyze(query)
    if not terms:
        return RetrievalResult(hits=(), query_terms_used=(), status="no_query_terms")

    scores: dict[str, float] = {}
    for term in terms:
        posting = index.postings.get(term)
        if not posting:
            continue
        idf = index.idf(term)
        for passage_id, tf in posting:
            norm = tf + index.k1 * (1.0 - index.b + index.b * index.doc_lengths[passage_id] / index.avg_doc_length)
            scores[passage_id] = scores.get(passage_id, 0.0) + idf * tf * (index.k1 + 1.0) / norm

    ranked = sorted(scores.items(), key=lambda item: (-item[1], item[0]))[:k]
    seen = set()
    used = tuple(t for t in terms if not (t in seen or seen.add(t)))
    return RetrievalResult(hits=tuple(ranked), query_terms_used=used, status="ok")


# On-disk layout: 8-byte magic, u32 version, u64 payload length, then a
# zlib-compressed JSON object holding parameters, passages and postings.

def save_index(index: PassageIndex, path) -> None:
    payload = {
        "k1": index.k1,
        "b": index.b,
        "doc_count": index.doc_count,
        "avg_doc_length": index.avg_doc_length,
        "doc_lengths": index.doc_lengths,
        "passages": {
            pid: {"source_doc": p.source_doc, "text": p.text, "token_count": p.token_count}
            for pid, p in index.passages.items()
        },
        "postings": {term: posting for term, posting in index.postings.items()},
    }
    blob = zlib.compress(json.dumps(payload, sort_keys=True).encode("utf-8"))
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<IQ", INDEX_VERSION, len(blob)))
        fh.write(blob)


def load_index(path) -> PassageIndex:
    with open(path, "rb") as fh:
        magic = fh.read(len(INDEX_MAGIC))
        if magic != INDEX_MAGIC:
            raise IndexFileError(f"{path}: not a passage index file")
        version, length = struct.unpack("<IQ", fh.read(12))
        if version != INDEX_VERSION:
            raise IndexFileError(
                f"{path}: index version {version} != {INDEX_VERSION}; rebuild from the corpus"
            )
        payload = json.loads(zlib.decompress(fh.read(length)).decode("utf-8"))
    index = PassageIndex(k1=payload["k1"], b=payload["b"])
    index.doc_count = payload["doc_count"]
    index.avg_doc_length = payload["avg_doc_length"]
    index.doc_lengths = dict(payload["doc_lengths"])
    index.passages = {
        pid: Passage(pid, rec["source_doc"], rec["text"], rec["token_count"])
        for pid, rec in payload["passages"].items()
    }
    index.postings = {
        term: [(pid, tf) for pid, tf in posting] for term, posting in payload["postings"].items()
    }
    return index
