"""Bundled synthetic planted-relevance corpus generator.

The planted rule: every query owns a few salted keywords (query-specific
tokens that appear nowhere else), and the relevance grade of a passage for
that query is the number of the query's keywords the passage contains.
A grade-g passage carries the query's first g keywords, nested: the first
keyword acts as an anchor (repeated several times, so every planted passage
is easy to retrieve), while the higher keywords appear with fewer repeats
(so relevance grades barely move bag-of-words cosine but are plainly
visible to a term-level scorer). Filler words pad every passage, and
queries additionally carry a couple of filler "noise" words that mislead
cosine similarity but carry almost no weight under a rarity-weighted
teacher. Together these two effects are what leave a trained reranker real
headroom over the first-stage dense ordering.

Everything is a pure function of the seed, so acceptance runs need no
external data.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import UsageError
from .evaluation import Qrels
from .numerics import make_rng
from .retrieval import Passage, Query
from .text import split_terms


@dataclass(frozen=True)
class SyntheticSpec:
    n_passages: int = 200
    n_queries: int = 40
    passage_len: int = 25
    keywords_per_query: int = 3
    filler_pool: int = 64
    anchor_repeats: int = 8
    keyword_repeats: int = 1
    noise_words_per_query: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_queries < 1 or self.n_passages < self.n_queries:
            raise UsageError("need at least one passage per query")
        if self.keywords_per_query < 1 or self.passage_len < 1:
            raise UsageError("keywords_per_query and passage_len must be positive")


def _grade_plan(per_query: int, max_grade: int) -> list[int]:
    """Planted grades for one query's passages: 3,2,2,1,1,3,2,2,1,1,..."""
    base = [max_grade] + [max_grade - 1] * 2 + [1] * 2 if max_grade >= 2 else [1] * 5
    plan: list[int] = []
    while len(plan) < per_query:
        plan.extend(base)
    return plan[:per_query]


def generate(spec: SyntheticSpec) -> tuple[list[Passage], list[Query], Qrels]:
    rng = make_rng(spec.seed)
    fillers = [f"fill{i:03d}" for i in range(spec.filler_pool)]

    queries: list[Query] = []
    query_keywords: list[list[str]] = []
    for qi in range(spec.n_queries):
        # salted: keywords are unique to this query by construction
        keywords = [f"kw{qi:03d}{chr(ord('a') + j)}" for j in range(spec.keywords_per_query)]
        noise_idx = rng.choice(spec.filler_pool, spec.noise_words_per_query, replace=False)
        noise = [fillers[i] for i in noise_idx]
        query_keywords.append(keywords)
        queries.append(Query(id=f"q{qi:03d}", text=" ".join(keywords + noise)))

    per_query = spec.n_passages // spec.n_queries
    extra = spec.n_passages - per_query * spec.n_queries
    passages: list[Passage] = []
    pid = 0
    for qi in range(spec.n_queries):
        count = per_query + (1 if qi < extra else 0)
        for grade in _grade_plan(count, spec.keywords_per_query):
            # nested keywords 1..grade; the first one is the anchor
            words = [query_keywords[qi][0]] * spec.anchor_repeats
            for ki in range(1, grade):
                words.extend([query_keywords[qi][ki]] * spec.keyword_repeats)
            while len(words) < spec.passage_len:
                words.append(fillers[int(rng.integers(spec.filler_pool))])
            rng.shuffle(words)
            passages.append(Passage(id=f"p{pid:04d}", text=" ".join(words[: spec.passage_len])))
            pid += 1

    qrels = Qrels()
    for qi, q in enumerate(queries):
        kws = set(query_keywords[qi])
        for p in passages:
            grade = len(kws & set(split_terms(p.text)))
            if grade > 0:
                qrels.set(q.id, p.id, grade)
    return passages, queries, qrels
