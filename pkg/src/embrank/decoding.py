"""Inference: greedy decoding over a shrinking set of candidate special
tokens, plus sliding-window orchestration over larger candidate lists.

Each decode step scores the not-yet-ranked candidates by dotting the current
hidden state against their projected embeddings (no scaling, no vocabulary
head), picks the argmax, appends that candidate's projected embedding to the
running sequence, and removes it from the decoding space. The output is
always a complete permutation and the number of generated tokens equals the
number of candidates in the window, never more.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from time import perf_counter

import numpy as np

from .errors import DataError, UsageError
from .evaluation import TokenStats
from .lm import (
    ORIGIN_CONTENT,
    ORIGIN_RANKED,
    PREFIX_PREDICTED,
    MixedInputSequence,
    assemble_rank_input,
)
from .numerics import softmax
from .templates import RANK_EMBEDDING_ONLY, RankTemplate


@dataclass(frozen=True)
class WindowSchedule:
    """Back-to-front sliding windows of size ``w`` advancing by ``s``.

    A single pass covers everything when ``w >= n``. Otherwise the pass that
    would start before position 0 is anchored at 0, so the top candidates
    always get one final joint pass (that last window may overlap more than
    ``w - s`` when ``n - w`` is not divisible by ``s``).
    """

    n: int
    w: int
    s: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise UsageError(f"candidate count must be >= 1, got {self.n}")
        if not 1 <= self.s <= self.w:
            raise UsageError(f"need 1 <= step <= window, got step {self.s} window {self.w}")

    @property
    def effective_window(self) -> int:
        return min(self.w, self.n)

    @property
    def passes(self) -> int:
        if self.w >= self.n:
            return 1
        return 1 + -(-(self.n - self.w) // self.s)

    def window_starts(self) -> list[int]:
        if self.w >= self.n:
            return [0]
        starts = [self.n - self.w]
        while starts[-1] > 0:
            starts.append(max(0, starts[-1] - self.s))
        return starts


@dataclass
class DecodingState:
    """Shrinking candidate set: remaining and ranked always partition the input."""

    remaining: list[int]
    ranked: list[int] = field(default_factory=list)

    def select(self, position: int) -> int:
        cand = self.remaining.pop(position)
        self.ranked.append(cand)
        return cand


@dataclass
class RankingList:
    """A permutation of the candidates with provenance and selection scores.

    ``scores`` are within-window selection probabilities; the sliding-window
    procedure only uses within-window order, so scores from different passes
    are not comparable with each other.
    """

    order: list[int]
    ids: list[str] | None
    provenance: list[tuple[int, int]]
    scores: list[float]
    stats: TokenStats


def score_remaining(h: np.ndarray, remaining: list[int], projected: np.ndarray) -> np.ndarray:
    """Distribution over the remaining candidates: softmax of h . E(p)."""
    if not remaining:
        raise UsageError("no remaining candidates to score")
    return softmax(projected[remaining] @ h)


def dc_decode(
    lm,
    projector,
    seq: MixedInputSequence,
    embeddings: np.ndarray | None = None,
    projected: np.ndarray | None = None,
    candidate_ids: list[str] | None = None,
    pass_index: int = 0,
    stats: TokenStats | None = None,
) -> RankingList:
    """Rank the candidates of an assembled embeddings-only prompt.

    Greedy loop: hidden state of the last position, argmax over the projected
    embeddings of the remaining candidates (ties to the lowest original
    index), append the winner's projected embedding, repeat. Conditions on
    its own previous predictions, never on labels; ``seq`` grows in place,
    one ranked-special position per step, each tagged with "predicted"
    provenance.
    """
    if projected is None:
        if embeddings is None:
            raise UsageError("need embeddings or projected vectors")
        projected, _ = projector.project_batch(embeddings)
    projected = np.atleast_2d(projected)
    n = projected.shape[0]
    if n < 1:
        raise UsageError("need at least one candidate")
    if any(tag == ORIGIN_CONTENT for tag in seq.origin):
        raise UsageError("inference prompts must be assembled without content")

    stats = stats if stats is not None else TokenStats()
    state = DecodingState(remaining=list(range(n)))
    provenance: dict[int, tuple[int, int]] = {}
    scores: dict[int, float] = {}

    session = lm.new_session()
    t0 = perf_counter()
    hidden = session.prefill(seq.vectors)
    stats.prefill_seconds += perf_counter() - t0
    stats.processed += seq.length

    h = hidden[-1]
    t1 = perf_counter()
    for step in range(n):
        logits = projected[state.remaining] @ h
        pick = int(np.argmax(logits))
        probs = softmax(logits)
        cand = state.remaining[pick]
        scores[cand] = float(probs[pick])
        provenance[cand] = (pass_index, step)
        state.select(pick)
        stats.generated += 1
        if state.remaining:
            seq.append_vector(
                projected[cand], ORIGIN_RANKED, passage_of=cand, provenance=PREFIX_PREDICTED
            )
            h = session.append(projected[cand])
    stats.decode_seconds += perf_counter() - t1
    stats.passes += 1

    order = state.ranked
    return RankingList(
        order=order,
        ids=[candidate_ids[i] for i in order] if candidate_ids is not None else None,
        provenance=[provenance[i] for i in order],
        scores=[scores[i] for i in order],
        stats=stats,
    )


def sliding_window_rerank(
    lm,
    projector,
    query_text: str,
    embeddings: np.ndarray,
    schedule: WindowSchedule,
    candidate_ids: list[str] | None = None,
    template: RankTemplate = RANK_EMBEDDING_ONLY,
) -> RankingList:
    """Full ranking of n candidates from back-to-front window passes.

    Candidates must arrive in first-stage order (best first). Each pass
    reranks ``w`` contiguous candidates of the current ordering in place, so
    the ``w - s`` overlap carries strong candidates toward the front.
    """
    embeddings = np.atleast_2d(embeddings)
    n = embeddings.shape[0]
    if n == 0:
        raise UsageError("cannot rerank an empty candidate list")
    if n != schedule.n:
        raise UsageError(f"schedule is for n={schedule.n} but got {n} candidates")
    projected, _ = projector.project_batch(embeddings)
    w = schedule.effective_window

    order = list(range(n))
    provenance: dict[int, tuple[int, int]] = {}
    scores: dict[int, float] = {}
    stats = TokenStats()
    for pass_index, start in enumerate(schedule.window_starts()):
        window = order[start : start + w]
        try:
            seq = assemble_rank_input(
                lm,
                projector,
                template,
                query_text,
                embeddings[window],
                projected=projected[window],
                reserve=len(window) - 1,
            )
        except DataError as exc:
            raise DataError(f"pass {pass_index} (start {start}): {exc}") from exc
        local = dc_decode(
            lm,
            projector,
            seq,
            projected=projected[window],
            pass_index=pass_index,
            stats=stats,
        )
        order[start : start + w] = [window[i] for i in local.order]
        for local_rank, local_idx in enumerate(local.order):
            cand = window[local_idx]
            provenance[cand] = (pass_index, local_rank)
            scores[cand] = local.scores[local_rank]

    return RankingList(
        order=order,
        ids=[candidate_ids[i] for i in order] if candidate_ids is not None else None,
        provenance=[provenance[i] for i in order],
        scores=[scores[i] for i in order],
        stats=stats,
    )
