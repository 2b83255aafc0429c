"""First-stage retrieval: corpus ingestion, a BM25 inverted index, a frozen
hashing encoder producing passage/query embeddings, and an exact brute-force
vector index. Candidates leave this module together with their embeddings so
the reranker can either reuse them or re-encode on the fly; both paths yield
identical vectors for identical text because the encoder is deterministic.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .numerics import Parameter, make_rng
from .text import split_terms, tokenize


@dataclass(frozen=True)
class Passage:
    id: str
    text: str
    title: str | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise DataError(f"passage {self.id!r} has empty text")

    @property
    def indexed_text(self) -> str:
        return f"{self.title} {self.text}" if self.title else self.text


@dataclass(frozen=True)
class Query:
    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text:
            raise DataError(f"query {self.id!r} has empty text")


def read_corpus(path: str | Path) -> list[Passage]:
    """Line-oriented JSON, one object per line: id, text, optional title."""
    passages: list[Passage] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                passage = Passage(id=str(obj["id"]), text=obj["text"], title=obj.get("title"))
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
            if passage.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate passage id {passage.id!r}")
            seen.add(passage.id)
            passages.append(passage)
    return passages


def read_queries(path: str | Path) -> list[Query]:
    queries: list[Query] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                queries.append(Query(id=str(obj["id"]), text=obj["text"]))
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc}") from exc
    return queries


def write_corpus(path: str | Path, passages: list[Passage]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in passages:
            obj: dict = {"id": p.id, "text": p.text}
            if p.title is not None:
                obj["title"] = p.title
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def write_queries(path: str | Path, queries: list[Query]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({"id": q.id, "text": q.text}, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Frozen hashing encoder
# ---------------------------------------------------------------------------


class HashEncoder:
    """Frozen hashing embedding-bag encoder.

    Words are hashed into a fixed random table; mean pooling averages the
    hit rows and L2-normalizes. The table has one extra reserved row acting
    as a CLS-style prefix slot: with ``pooling="cls"`` the encoder returns
    that reserved prefix row (normalized), which is the literal bag-model
    analogue of taking the summary-token position. Mean pooling is the
    default everywhere. The table never trains; both training stages keep
    the encoder frozen.
    """

    def __init__(
        self,
        dim: int = 64,
        vocab_hash_size: int = 4096,
        pooling: str = "mean",
        seed: int = 0,
        table: np.ndarray | None = None,
    ) -> None:
        if pooling not in ("mean", "cls"):
            raise UsageError(f"unknown pooling {pooling!r}")
        self.dim = dim
        self.vocab_hash_size = vocab_hash_size
        self.pooling = pooling
        self.seed = seed
        if table is None:
            rng = make_rng(seed)
            table = rng.standard_normal((vocab_hash_size + 1, dim)) / math.sqrt(dim)
        if table.shape != (vocab_hash_size + 1, dim):
            raise DataError(
                f"encoder table shape {table.shape} does not match "
                f"(vocab_hash_size + 1, dim) = {(vocab_hash_size + 1, dim)}"
            )
        self.table = Parameter("encoder.table", table, trainable=False)

    @property
    def cls_row(self) -> int:
        return self.vocab_hash_size

    def parameters(self) -> list[Parameter]:
        return [self.table]

    def encode(self, text: str) -> np.ndarray:
        """Unit-norm embedding of ``text``; raises on unencodable text."""
        ids = tokenize(text, self.vocab_hash_size)
        if not ids:
            raise DataError(f"unencodable text: no tokens in {text!r}")
        if self.pooling == "mean":
            vec = self.table.value[ids].mean(axis=0)
        else:
            vec = self.table.value[self.cls_row].copy()
        norm = float(np.linalg.norm(vec))
        if norm < 1e-12:
            raise DataError("degenerate zero embedding")
        return vec / norm

    def encode_batch(self, texts: list[str]) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts])


# ---------------------------------------------------------------------------
# BM25 inverted index
# ---------------------------------------------------------------------------


@dataclass
class Bm25Index:
    """Okapi BM25 over string terms, IDF = ln(1 + (N - df + 0.5)/(df + 0.5))."""

    k1: float = 0.9
    b: float = 0.4
    postings: dict[str, list[tuple[str, int]]] = field(default_factory=dict)
    doc_lengths: dict[str, int] = field(default_factory=dict)
    avgdl: float = 0.0
    n_docs: int = 0

    @classmethod
    def build(cls, passages: list[Passage], k1: float = 0.9, b: float = 0.4) -> "Bm25Index":
        if not passages:
            raise DataError("cannot build BM25 index over an empty corpus")
        index = cls(k1=k1, b=b)
        for p in passages:
            terms = split_terms(p.indexed_text)
            index.doc_lengths[p.id] = len(terms)
            for term, tf in Counter(terms).items():
                index.postings.setdefault(term, []).append((p.id, tf))
        index.n_docs = len(passages)
        index.avgdl = sum(index.doc_lengths.values()) / index.n_docs
        return index

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))

    def score(self, query: Query, passage_id: str) -> float:
        """BM25 score of one indexed passage; unknown ids are an error."""
        if passage_id not in self.doc_lengths:
            raise DataError(f"passage id {passage_id!r} is not indexed")
        dl = self.doc_lengths[passage_id]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
        total = 0.0
        for term in split_terms(query.text):
            tf = 0
            for pid, f in self.postings.get(term, ()):
                if pid == passage_id:
                    tf = f
                    break
            if tf == 0:
                continue
            total += self.idf(term) * (tf * (self.k1 + 1.0)) / (tf + norm)
        return total

    def search(self, query: Query, k: int) -> list[tuple[str, float]]:
        """Top-k (passage id, score), descending score, ties by ascending id."""
        scores: dict[str, float] = {}
        for term, qtf in Counter(split_terms(query.text)).items():
            idf = self.idf(term)
            if idf == 0.0:
                continue
            for pid, tf in self.postings[term]:
                dl = self.doc_lengths[pid]
                norm = self.k1 * (1.0 - self.b + self.b * dl / self.avgdl)
                scores[pid] = scores.get(pid, 0.0) + qtf * idf * (tf * (self.k1 + 1.0)) / (tf + norm)
        ranked = [(pid, scores.get(pid, 0.0)) for pid in self.doc_lengths]
        ranked.sort(key=lambda item: (-item[1], item[0]))
        return ranked[: min(k, self.n_docs)]


def save_bm25(path: str | Path, index: Bm25Index) -> None:
    """Deterministic JSON serialization (identical corpus gives identical bytes)."""
    obj = {
        "k1": index.k1,
        "b": index.b,
        "n_docs": index.n_docs,
        "avgdl": index.avgdl,
        "doc_lengths": dict(sorted(index.doc_lengths.items())),
        "postings": {
            term: sorted(entries) for term, entries in sorted(index.postings.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def load_bm25(path: str | Path) -> Bm25Index:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed BM25 index: {exc}") from exc
    try:
        return Bm25Index(
            k1=float(obj["k1"]),
            b=float(obj["b"]),
            postings={t: [(pid, int(tf)) for pid, tf in e] for t, e in obj["postings"].items()},
            doc_lengths={pid: int(n) for pid, n in obj["doc_lengths"].items()},
            avgdl=float(obj["avgdl"]),
            n_docs=int(obj["n_docs"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed BM25 index: {exc}") from exc


# ---------------------------------------------------------------------------
# Dense vector index
# ---------------------------------------------------------------------------


@dataclass
class VectorIndex:
    """Exact brute-force index: row i of ``matrix`` is the unit embedding of ids[i]."""

    ids: list[str]
    matrix: np.ndarray

    @classmethod
    def from_encoder(cls, passages: list[Passage], encoder: HashEncoder) -> "VectorIndex":
        if not passages:
            raise DataError("cannot build vector index over an empty corpus")
        return cls(
            ids=[p.id for p in passages],
            matrix=encoder.encode_batch([p.text for p in passages]),
        )

    def row(self, passage_id: str) -> np.ndarray:
        try:
            return self.matrix[self.ids.index(passage_id)]
        except ValueError:
            raise DataError(f"passage id {passage_id!r} is not in the vector index") from None

    def search(self, query_vec: np.ndarray, k: int) -> list[tuple[str, float]]:
        scores = self.matrix @ query_vec
        order = sorted(range(len(self.ids)), key=lambda i: (-scores[i], self.ids[i]))
        return [(self.ids[i], float(scores[i])) for i in order[: min(k, len(self.ids))]]


def write_embeddings(path: str | Path, ids: list[str], matrix: np.ndarray) -> None:
    """Header line {"dim": D, "count": C} then one {"id", "values"} line per row."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"dim": int(matrix.shape[1]), "count": len(ids)}) + "\n")
        for pid, row in zip(ids, matrix):
            fh.write(json.dumps({"id": pid, "values": [float(x) for x in row]}) + "\n")


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read an embeddings file; rows are re-normalized to unit length on load."""
    with open(path, encoding="utf-8") as fh:
        try:
            header = json.loads(fh.readline())
            dim, count = int(header["dim"]), int(header["count"])
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataError(f"{path}:1: bad embeddings header: {exc}") from exc
        ids: list[str] = []
        rows: list[np.ndarray] = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                vec = np.asarray(obj["values"], dtype=np.float64)
                pid = str(obj["id"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: malformed embedding line: {exc}") from exc
            if vec.shape != (dim,):
                raise DataError(f"{path}:{lineno}: expected {dim} values, got {vec.shape}")
            norm = float(np.linalg.norm(vec))
            if norm < 1e-12:
                raise DataError(f"{path}:{lineno}: zero-norm embedding")
            ids.append(pid)
            rows.append(vec / norm)
    if len(ids) != count:
        raise DataError(f"{path}: header promised {count} rows, found {len(ids)}")
    return ids, np.stack(rows)


# ---------------------------------------------------------------------------
# Retrieval facade
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Retrieved:
    passage: Passage
    embedding: np.ndarray
    score: float


class Retriever:
    """Bundles corpus, BM25 index, vector index, and encoder behind one top-k call."""

    def __init__(self, passages: list[Passage], encoder: HashEncoder,
                 bm25: Bm25Index | None = None, vindex: VectorIndex | None = None) -> None:
        if not passages:
            raise DataError("empty corpus")
        self.passages = {p.id: p for p in passages}
        self.encoder = encoder
        self.bm25 = bm25 if bm25 is not None else Bm25Index.build(passages)
        self.vindex = vindex if vindex is not None else VectorIndex.from_encoder(passages, encoder)

    def topk(self, query: Query, k: int, backend: str = "dense") -> list[Retrieved]:
        if k < 1:
            raise UsageError(f"k must be >= 1, got {k}")
        if backend == "dense":
            qvec = self.encoder.encode(query.text)
            hits = self.vindex.search(qvec, k)
        elif backend == "bm25":
            hits = self.bm25.search(query, k)
        else:
            raise UsageError(f"unknown retrieval backend {backend!r}")
        return [
            Retrieved(self.passages[pid], self.vindex.row(pid), score)
            for pid, score in hits
        ]


def retrieve_topk(retriever: Retriever, query: Query, k: int, backend: str = "dense") -> list[Retrieved]:
    return retriever.topk(query, k, backend)
