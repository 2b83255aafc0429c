"""Ranking quality and efficiency measurement.

TREC-style qrels and run files, NDCG@k, a paired two-sided t-test whose
Student-t tail is computed from a hand-rolled continued-fraction regularized
incomplete beta (the test suite checks it against an independent reference),
and the token/latency accounting that separates prefill from decode.

The text-mode cost figures are a closed-form model, not a measurement:
real text-generating rankers also emit separators and malformed output, so
modeled generated counts are a lower bound. Report writers repeat this in a
footer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from .errors import DataError, UsageError


# ---------------------------------------------------------------------------
# Token and latency accounting
# ---------------------------------------------------------------------------


@dataclass
class TokenStats:
    """Processed/generated token counts and the prefill/decode wall-clock split.

    Processed counts every prefilled position, with each passage embedding
    counting as exactly one position; generated counts every emitted special
    token. Sliding-window runs accumulate across passes.
    """

    processed: float = 0.0
    generated: float = 0.0
    prefill_seconds: float = 0.0
    decode_seconds: float = 0.0
    passes: int = 0

    def add(self, other: "TokenStats") -> None:
        self.processed += other.processed
        self.generated += other.generated
        self.prefill_seconds += other.prefill_seconds
        self.decode_seconds += other.decode_seconds
        self.passes += other.passes


@dataclass(frozen=True)
class CostModel:
    """Closed-form per-pass cost: prompt length and generated tokens.

    mode "embedding": prompt L_I + L_q + w, generated w (one special per
    candidate). mode "text": prompt L_I + L_q + w * L_p, generated m * w
    where m is the observed tokens-per-ranked-passage of text systems.
    Totals multiply by the number of sliding passes.
    """

    mode: str
    l_instruction: float
    l_query: float
    l_passage: float
    m: float = 4.5

    def __post_init__(self) -> None:
        if self.mode not in ("embedding", "text"):
            raise UsageError(f"unknown cost mode {self.mode!r}")
        if min(self.l_instruction, self.l_query, self.l_passage, self.m) < 0:
            raise UsageError("cost model lengths must be non-negative")


def predict_cost(model: CostModel, n: int, schedule) -> TokenStats:
    """Closed-form totals over a window schedule (``schedule.n`` must equal n)."""
    if schedule.n != n:
        raise UsageError(f"schedule is for n={schedule.n}, not {n}")
    w = schedule.effective_window
    passes = schedule.passes
    if model.mode == "embedding":
        per_processed = model.l_instruction + model.l_query + w
        per_generated = float(w)
    else:
        per_processed = model.l_instruction + model.l_query + w * model.l_passage
        per_generated = model.m * w
    return TokenStats(
        processed=passes * per_processed,
        generated=passes * per_generated,
        passes=passes,
    )


def measure_cost(rankings) -> TokenStats:
    """Aggregate the observed TokenStats of one or more decoded rankings."""
    if hasattr(rankings, "stats"):
        rankings = [rankings]
    total = TokenStats()
    for r in rankings:
        total.add(r.stats)
    return total


EFFICIENCY_COLUMNS = ("system", "n", "w", "s", "processed", "generated", "prefill_s", "decode_s")

TEXT_MODE_FOOTER = (
    "# text-mode rows are closed-form model predictions, not measurements; "
    "real text rankers also emit separators and malformed output, so modeled "
    "generated counts are a lower bound"
)


def write_efficiency_report(path: str | Path, rows: list[dict]) -> None:
    """Tab-separated efficiency table with the text-mode caveat in a footer."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(EFFICIENCY_COLUMNS) + "\n")
        for row in rows:
            fh.write("\t".join(str(row[c]) for c in EFFICIENCY_COLUMNS) + "\n")
        fh.write(TEXT_MODE_FOOTER + "\n")


# ---------------------------------------------------------------------------
# Qrels and run files
# ---------------------------------------------------------------------------


class Qrels:
    """Graded relevance judgments; a missing pair means grade zero."""

    def __init__(self) -> None:
        self._grades: dict[str, dict[str, int]] = {}

    def set(self, query_id: str, passage_id: str, grade: int) -> None:
        if grade < 0:
            raise DataError(f"negative grade for ({query_id}, {passage_id})")
        self._grades.setdefault(query_id, {})[passage_id] = grade

    def grade(self, query_id: str, passage_id: str) -> int:
        return self._grades.get(query_id, {}).get(passage_id, 0)

    def judged(self, query_id: str) -> bool:
        return query_id in self._grades

    def query_grades(self, query_id: str) -> dict[str, int]:
        return dict(self._grades.get(query_id, {}))

    @property
    def query_ids(self) -> list[str]:
        return sorted(self._grades)


def read_qrels(path: str | Path) -> Qrels:
    """Whitespace-separated lines: qid 0 docid grade."""
    qrels = Qrels()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                qrels.set(parts[0], parts[2], int(parts[3]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad grade {parts[3]!r}") from exc
    return qrels


def write_qrels(path: str | Path, qrels: Qrels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in qrels.query_ids:
            for pid, grade in sorted(qrels.query_grades(qid).items()):
                fh.write(f"{qid} 0 {pid} {grade}\n")


@dataclass
class Run:
    """Per-query ranked (passage id, score) lists plus the system tag."""

    tag: str = "embrank"
    results: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def set_ranking(self, query_id: str, ranked: list[tuple[str, float]]) -> None:
        ids = [pid for pid, _ in ranked]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate passage ids in ranking for query {query_id!r}")
        self.results[query_id] = list(ranked)

    @property
    def query_ids(self) -> list[str]:
        return sorted(self.results)


def read_run(path: str | Path) -> Run:
    """TREC run lines: qid Q0 docid rank score tag."""
    run = Run()
    per_query: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, pid, rank, score, tag = parts
            try:
                per_query.setdefault(qid, []).append((int(rank), pid, float(score)))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad rank or score") from exc
            run.tag = tag
    for qid, rows in per_query.items():
        rows.sort()
        ranks = [r for r, _, _ in rows]
        if ranks != list(range(1, len(rows) + 1)):
            raise DataError(f"run ranks for query {qid!r} are not contiguous from 1")
        run.set_ranking(qid, [(pid, score) for _, pid, score in rows])
    return run


def write_run(path: str | Path, run: Run) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in run.query_ids:
            for rank, (pid, score) in enumerate(run.results[qid], start=1):
                fh.write(f"{qid} Q0 {pid} {rank} {score:.6f} {run.tag}\n")


# ---------------------------------------------------------------------------
# NDCG
# ---------------------------------------------------------------------------


@dataclass
class NdcgResult:
    per_query: dict[str, float]
    mean: float
    missing_from_qrels: list[str]
    zero_ideal: list[str]


def _gain(rel: int, kind: str) -> float:
    if kind == "exp":
        return float(2**rel - 1)
    if kind == "linear":
        return float(rel)
    raise UsageError(f"unknown gain {kind!r}")


def ndcg_at_k(run: Run, qrels: Qrels, k: int = 10, gain: str = "exp") -> NdcgResult:
    """NDCG@k per query plus the mean over judged queries.

    Queries present in the run but absent from the qrels are excluded from
    the mean and reported; queries whose judgments are all zero score 0 and
    are reported separately but stay in the mean.
    """
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    per_query: dict[str, float] = {}
    missing: list[str] = []
    zero_ideal: list[str] = []
    for qid in run.query_ids:
        if not qrels.judged(qid):
            missing.append(qid)
            continue
        ranked = run.results[qid]
        dcg = 0.0
        for i, (pid, _) in enumerate(ranked[:k]):
            dcg += _gain(qrels.grade(qid, pid), gain) / math.log2(i + 2)
        ideal_grades = sorted(qrels.query_grades(qid).values(), reverse=True)
        idcg = sum(
            _gain(rel, gain) / math.log2(i + 2) for i, rel in enumerate(ideal_grades[:k])
        )
        if idcg == 0.0:
            per_query[qid] = 0.0
            zero_ideal.append(qid)
        else:
            per_query[qid] = dcg / idcg
    mean = sum(per_query.values()) / len(per_query) if per_query else 0.0
    return NdcgResult(per_query, mean, missing, zero_ideal)


# ---------------------------------------------------------------------------
# Paired two-sided t-test
# ---------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz method)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 200):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-16:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) via the continued fraction, using the symmetry split."""
    if not 0.0 <= x <= 1.0:
        raise UsageError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if df < 1:
        raise UsageError(f"degrees of freedom must be >= 1, got {df}")
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    flag: str | None = None


def paired_ttest(a: dict[str, float], b: dict[str, float]) -> TTestResult:
    """Classic paired t on per-query differences, two-sided.

    Degenerate cases follow fixed conventions: identical inputs give p = 1;
    zero variance with a nonzero mean difference gives p = 0 with a flag.
    """
    if set(a) != set(b):
        raise UsageError("paired t-test needs the same query ids on both sides")
    keys = sorted(a)
    n = len(keys)
    if n < 2:
        raise UsageError(f"paired t-test needs at least 2 pairs, got {n}")
    diffs = [a[k] - b[k] for k in keys]
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, p=1.0, flag="all-zero differences")
        return TTestResult(
            t=math.copysign(math.inf, mean), p=0.0, flag="zero variance, nonzero mean"
        )
    t = mean / math.sqrt(var / n)
    return TTestResult(t=t, p=student_t_two_sided_p(t, n - 1))
