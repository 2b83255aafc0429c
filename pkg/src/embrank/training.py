"""Two-stage training.

Stage one (alignment) teaches the projector to place passage embeddings
where the frozen LM can read them, via text reconstruction: the model is
prompted with one projected embedding and must predict the original tokens;
only projector parameters move.

Stage two (learning-to-rank) teacher-forces the golden permutation and
drives three terms at each step i: the listwise rank loss on the
embeddings-only prompt, the same loss on the content-augmented prompt, and a
KL term pulling the embeddings-only step distribution toward the
content-augmented one. Both KL branches receive gradients. Projector and LM
train; the encoder stays frozen.

All step distributions follow the sequential form: softmax over the dot
products between the step hidden state and the projected embeddings of the
candidates not yet placed (in golden order), so the rank loss is exactly the
negative log-probability of the golden permutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DataError, TrainingDiverged, UsageError
from .lm import (
    ORIGIN_CONTENT,
    ORIGIN_PASSAGE,
    ORIGIN_RANKED,
    PREFIX_GOLDEN,
    DecoderLm,
    MixedInputSequence,
    assemble_align_input,
    assemble_rank_input,
    rank_prompt_length,
)
from .numerics import NumericsError, Parameter, clip_global_norm, log_softmax, make_rng
from .projector import Projector
from .retrieval import HashEncoder, Passage, Query
from .templates import ALIGN_TEMPLATES, RANK_EMBEDDING_ONLY, RANK_WITH_CONTENT, RankTemplate
from .text import split_terms

STAGE_ALIGN = "align"
STAGE_RANK = "rank"


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass
class AlignmentSample:
    """One reconstruction target: its text, LM token ids, frozen embedding,
    and the pinned instruction variant."""

    text: str
    token_ids: list[int]
    embedding: np.ndarray
    template_idx: int

    def __post_init__(self) -> None:
        if not self.token_ids:
            raise DataError(f"alignment sample has empty target: {self.text!r}")


@dataclass
class RankSample:
    query: Query
    passages: list[Passage]
    embeddings: np.ndarray
    content_ids: list[list[int]]
    golden: list[int]

    def __post_init__(self) -> None:
        n = len(self.passages)
        if sorted(self.golden) != list(range(n)):
            raise DataError(f"golden is not a permutation of 0..{n - 1}: {self.golden}")

    @property
    def n(self) -> int:
        return len(self.passages)


# ---------------------------------------------------------------------------
# Teacher scorer and golden rankings
# ---------------------------------------------------------------------------

TeacherScorer = Callable[[Query, Passage], float]


class LexicalTeacher:
    """Transparent rarity-weighted term-overlap scorer.

    score(q, p) = sum over distinct query terms present in the passage of
    ln(1 + N / (1 + df)), with document frequencies taken from the corpus it
    was built over. Deterministic, and rare terms dominate common filler.
    """

    def __init__(self, passages: list[Passage]) -> None:
        self.n_docs = len(passages)
        self.df: dict[str, int] = {}
        for p in passages:
            for term in set(split_terms(p.indexed_text)):
                self.df[term] = self.df.get(term, 0) + 1

    def weight(self, term: str) -> float:
        return math.log(1.0 + self.n_docs / (1.0 + self.df.get(term, 0)))

    def __call__(self, query: Query, passage: Passage) -> float:
        passage_terms = set(split_terms(passage.indexed_text))
        return sum(
            self.weight(t) for t in set(split_terms(query.text)) if t in passage_terms
        )


def make_golden_ranking(query: Query, passages: list[Passage], teacher: TeacherScorer) -> list[int]:
    """Indices sorted by descending teacher score, ties by ascending index."""
    scores = [teacher(query, p) for p in passages]
    return sorted(range(len(passages)), key=lambda i: (-scores[i], i))


def augment_shuffle(sample: RankSample, rng: np.random.Generator) -> RankSample:
    """Permute the candidate order; the golden labels still denote the same
    passage sequence afterwards."""
    n = sample.n
    perm = rng.permutation(n)
    inverse = np.empty(n, dtype=int)
    inverse[perm] = np.arange(n)
    return RankSample(
        query=sample.query,
        passages=[sample.passages[i] for i in perm],
        embeddings=sample.embeddings[perm],
        content_ids=[sample.content_ids[i] for i in perm],
        golden=[int(inverse[g]) for g in sample.golden],
    )


def build_alignment_dataset(
    texts: list[str],
    encoder: HashEncoder,
    lm: DecoderLm,
    rng: np.random.Generator,
    max_target_tokens: int | None = None,
) -> list[AlignmentSample]:
    samples = []
    for text in texts:
        ids = lm.tokenize(text)
        if not ids:
            continue
        if max_target_tokens is not None:
            ids = ids[:max_target_tokens]
        samples.append(
            AlignmentSample(
                text=text,
                token_ids=ids,
                embedding=encoder.encode(text),
                template_idx=int(rng.integers(len(ALIGN_TEMPLATES))),
            )
        )
    if not samples:
        raise DataError("no encodable alignment texts")
    return samples


def build_rank_sample(
    query: Query,
    passages: list[Passage],
    embeddings: np.ndarray,
    teacher: TeacherScorer,
    lm: DecoderLm,
    content_max_tokens: int | None = None,
) -> RankSample:
    content = [lm.tokenize(p.text) for p in passages]
    if content_max_tokens is not None:
        content = [c[:content_max_tokens] for c in content]
    return RankSample(
        query=query,
        passages=list(passages),
        embeddings=np.atleast_2d(embeddings),
        content_ids=content,
        golden=make_golden_ranking(query, passages, teacher),
    )


def filter_by_length(samples: list[RankSample], lm: DecoderLm) -> list[RankSample]:
    """Drop samples whose content-augmented teacher-forced assembly would
    overflow the LM context (the training-time length filter)."""
    kept = []
    for s in samples:
        total = rank_prompt_length(
            lm, RANK_WITH_CONTENT, s.query.text, s.n, [len(c) for c in s.content_ids]
        ) + (s.n - 1)
        if total <= lm.cfg.max_seq:
            kept.append(s)
    return kept


# ---------------------------------------------------------------------------
# Alignment loss
# ---------------------------------------------------------------------------


def alignment_loss(
    lm: DecoderLm, projector: Projector, sample: AlignmentSample, with_grad: bool = True
) -> float:
    """Sum of per-token negative log-likelihoods of the reconstruction target,
    teacher-forced. Gradients flow through the frozen LM into the projector."""
    target = sample.token_ids
    if not target:
        raise DataError("empty reconstruction target")
    projected, proj_cache = projector.project_batch(
        sample.embedding[None, :], with_cache=with_grad
    )
    seq = assemble_align_input(lm, projected[0], template_idx=sample.template_idx)
    base_len = seq.length
    total_len = base_len + len(target) - 1
    if total_len > lm.cfg.max_seq:
        raise DataError(f"alignment sample length {total_len} exceeds max_seq {lm.cfg.max_seq}")
    for tid in target[:-1]:
        seq.append_vector(lm.token_table.value[tid], ORIGIN_CONTENT, token_id=tid)

    hidden, lm_cache = lm.forward_full(seq.vectors)
    predict_pos = np.arange(base_len - 1, base_len - 1 + len(target))
    logits = lm.vocab_logits(hidden[predict_pos])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    target_arr = np.asarray(target)
    loss = float((log_z - shifted[np.arange(len(target)), target_arr]).sum())

    if with_grad:
        dlogits = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        dlogits[np.arange(len(target)), target_arr] -= 1.0
        if lm.cfg.tie_vocab_head:
            if lm.token_table.trainable:
                lm.token_table.accumulate(dlogits.T @ hidden[predict_pos])
        elif lm.vocab_head.trainable:
            lm.vocab_head.accumulate(hidden[predict_pos].T @ dlogits)
        dhidden = np.zeros_like(hidden)
        dhidden[predict_pos] = dlogits @ lm.head_matrix().T
        dvec = lm.backward_full(lm_cache, dhidden)
        dproj = np.zeros((1, lm.cfg.d_lm))
        _scatter_input_grads(lm, seq, dvec, dproj)
        projector.backward_batch(proj_cache, dproj)
    return loss


def _scatter_input_grads(
    lm: DecoderLm, seq: MixedInputSequence, dvec: np.ndarray, dproj: np.ndarray
) -> None:
    """Route input-vector gradients to the token table (token positions) and
    to the per-candidate projected-vector buckets (special positions)."""
    token_pos = [i for i, tid in enumerate(seq.token_ids) if tid is not None]
    if token_pos and lm.token_table.trainable:
        ids = [seq.token_ids[i] for i in token_pos]
        np.add.at(lm.token_table.grad, ids, dvec[token_pos])
    special_pos = [
        i for i, tag in enumerate(seq.origin) if tag in (ORIGIN_PASSAGE, ORIGIN_RANKED)
    ]
    if special_pos:
        cands = [seq.passage_of[i] for i in special_pos]
        np.add.at(dproj, cands, dvec[special_pos])


# ---------------------------------------------------------------------------
# Rank-stage losses
# ---------------------------------------------------------------------------


@dataclass
class _Branch:
    seq: MixedInputSequence
    base_len: int
    hidden: np.ndarray
    lm_cache: dict
    step_logprobs: list[np.ndarray]


def _branch_forward(
    lm: DecoderLm,
    sample: RankSample,
    projected: np.ndarray,
    include_content: bool,
    template: RankTemplate | None = None,
) -> _Branch:
    if template is None:
        template = RANK_WITH_CONTENT if include_content else RANK_EMBEDDING_ONLY
    seq = assemble_rank_input(
        lm,
        None,
        template,
        sample.query.text,
        sample.embeddings,
        include_content=include_content,
        contents=sample.content_ids if include_content else None,
        projected=projected,
        reserve=sample.n - 1,
    )
    base_len = seq.length
    for g in sample.golden[:-1]:
        seq.append_vector(projected[g], ORIGIN_RANKED, passage_of=g, provenance=PREFIX_GOLDEN)
    hidden, lm_cache = lm.forward_full(seq.vectors)
    step_logprobs = []
    for i in range(sample.n):
        tail = sample.golden[i:]
        z = projected[tail] @ hidden[base_len - 1 + i]
        step_logprobs.append(log_softmax(z))
    return _Branch(seq, base_len, hidden, lm_cache, step_logprobs)


def _branch_backward(
    lm: DecoderLm,
    sample: RankSample,
    branch: _Branch,
    dsteps: list[np.ndarray],
    projected: np.ndarray,
) -> np.ndarray:
    """Push step-logit gradients through scores, LM, and input scatter.
    Returns the accumulated gradient on each candidate's projected vector."""
    dhidden = np.zeros_like(branch.hidden)
    dproj = np.zeros_like(projected)
    for i, dz in enumerate(dsteps):
        pos = branch.base_len - 1 + i
        tail = sample.golden[i:]
        dhidden[pos] += dz @ projected[tail]
        dproj[tail] += np.outer(dz, branch.hidden[pos])
    dvec = lm.backward_full(branch.lm_cache, dhidden)
    _scatter_input_grads(lm, branch.seq, dvec, dproj)
    return dproj


def rank_step_distribution(
    lm: DecoderLm,
    projector: Projector,
    sample: RankSample,
    step: int,
    include_content: bool = False,
    template: RankTemplate | None = None,
) -> np.ndarray:
    """Teacher-forced distribution at step ``step`` (1-based) over the not-yet
    -placed candidates, in golden order."""
    if not 1 <= step <= sample.n:
        raise UsageError(f"step must be in 1..{sample.n}, got {step}")
    projected, _ = projector.project_batch(sample.embeddings)
    branch = _branch_forward(lm, sample, projected, include_content, template)
    return np.exp(branch.step_logprobs[step - 1])


@dataclass
class RankLosses:
    rank: float = 0.0
    content: float = 0.0
    kl: float = 0.0

    def total(self, alpha: float) -> float:
        return self.rank + self.content + alpha * self.kl


def _rank_losses(
    lm: DecoderLm,
    projector: Projector,
    sample: RankSample,
    weights: tuple[float, float, float],
    with_grad: bool,
    templates: tuple[RankTemplate | None, RankTemplate | None] = (None, None),
) -> RankLosses:
    """Shared engine behind the rank-stage losses.

    ``weights`` are the gradient coefficients (w_rank, w_content, w_kl); loss
    values are always reported unweighted. The content-augmented forward pass
    is shared between the content loss and the KL term. Both KL branches get
    gradients; there is no stop-gradient.
    """
    w_rank, w_content, w_kl = weights
    need_a = w_rank != 0.0 or w_kl != 0.0
    need_b = w_content != 0.0 or w_kl != 0.0
    projected, proj_cache = projector.project_batch(sample.embeddings, with_cache=with_grad)

    branch_a = (
        _branch_forward(lm, sample, projected, False, templates[0]) if need_a else None
    )
    branch_b = (
        _branch_forward(lm, sample, projected, True, templates[1]) if need_b else None
    )

    losses = RankLosses()
    if branch_a is not None and w_rank != 0.0:
        losses.rank = -sum(float(lp[0]) for lp in branch_a.step_logprobs)
    if branch_b is not None and w_content != 0.0:
        losses.content = -sum(float(lp[0]) for lp in branch_b.step_logprobs)
    if w_kl != 0.0:
        for lp_a, lp_b in zip(branch_a.step_logprobs, branch_b.step_logprobs):
            p = np.exp(lp_a)
            losses.kl += float((p * (lp_a - lp_b)).sum())

    if with_grad:
        dproj_total = np.zeros_like(projected)
        if branch_a is not None:
            dsteps_a = []
            for i, lp_a in enumerate(branch_a.step_logprobs):
                p = np.exp(lp_a)
                dz = np.zeros_like(p)
                if w_rank != 0.0:
                    dz += w_rank * p
                    dz[0] -= w_rank
                if w_kl != 0.0:
                    r = lp_a - branch_b.step_logprobs[i]
                    dz += w_kl * p * (r - float((p * r).sum()))
                dsteps_a.append(dz)
            dproj_total += _branch_backward(lm, sample, branch_a, dsteps_a, projected)
        if branch_b is not None:
            dsteps_b = []
            for i, lp_b in enumerate(branch_b.step_logprobs):
                q = np.exp(lp_b)
                dz = np.zeros_like(q)
                if w_content != 0.0:
                    dz += w_content * q
                    dz[0] -= w_content
                if w_kl != 0.0:
                    dz += w_kl * (q - np.exp(branch_a.step_logprobs[i]))
                dsteps_b.append(dz)
            dproj_total += _branch_backward(lm, sample, branch_b, dsteps_b, projected)
        projector.backward_batch(proj_cache, dproj_total)
    return losses


def listmle_rank_loss(
    lm: DecoderLm,
    projector: Projector,
    sample: RankSample,
    with_grad: bool = True,
    template: RankTemplate | None = None,
) -> float:
    """Negative log-probability of the golden permutation, embeddings only."""
    return _rank_losses(lm, projector, sample, (1.0, 0.0, 0.0), with_grad, (template, None)).rank


def content_rank_loss(
    lm: DecoderLm,
    projector: Projector,
    sample: RankSample,
    with_grad: bool = True,
    template: RankTemplate | None = None,
) -> float:
    """Same listwise form over the content-augmented prompt."""
    return _rank_losses(
        lm, projector, sample, (0.0, 1.0, 0.0), with_grad, (None, template)
    ).content


def kl_distill_loss(
    lm: DecoderLm,
    projector: Projector,
    sample: RankSample,
    with_grad: bool = True,
    templates: tuple[RankTemplate | None, RankTemplate | None] = (None, None),
) -> float:
    """Sum over steps of KL(embeddings-only step dist || content-augmented
    step dist); zero exactly when the two distributions coincide at every step."""
    return _rank_losses(lm, projector, sample, (0.0, 0.0, 1.0), with_grad, templates).kl


def combined_loss(
    lm: DecoderLm,
    projector: Projector,
    sample: RankSample,
    alpha: float = 0.2,
    with_grad: bool = True,
) -> RankLosses:
    """rank + content + alpha * KL; the gradient of the sum is the sum of
    the gradients."""
    if alpha < 0:
        raise UsageError(f"alpha must be non-negative, got {alpha}")
    return _rank_losses(lm, projector, sample, (1.0, 1.0, alpha), with_grad)


# ---------------------------------------------------------------------------
# Optimizer and training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    stage: str
    lr: float | None = None
    batch_size: int | None = None
    epochs: int = 1
    alpha: float = 0.2
    clip_norm: float = 1.0
    seed: int = 0
    shuffle_augment: bool = True

    def __post_init__(self) -> None:
        if self.stage not in (STAGE_ALIGN, STAGE_RANK):
            raise UsageError(f"unknown stage {self.stage!r}")
        if self.alpha < 0:
            raise UsageError("alpha must be non-negative")
        if self.lr is None:
            self.lr = 1e-4 if self.stage == STAGE_ALIGN else 2e-5
        if self.batch_size is None:
            self.batch_size = 128 if self.stage == STAGE_ALIGN else 32


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: list[Parameter], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p in params:
            if not p.trainable:
                continue
            m = self._m.setdefault(p.name, np.zeros_like(p.value))
            v = self._v.setdefault(p.name, np.zeros_like(p.value))
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def set_stage(stage: str, lm: DecoderLm, projector: Projector, encoder: HashEncoder) -> None:
    """Apply the stage freezing contract: encoder never trains; the LM only
    trains in the rank stage; the projector trains in both."""
    for p in encoder.parameters():
        p.trainable = False
    projector.set_trainable(True)
    lm.set_trainable(stage == STAGE_RANK)


@dataclass
class TrainResult:
    steps: int
    losses: list[float]
    log_lines: list[str]


def train(
    stage: str,
    dataset: list,
    lm: DecoderLm,
    projector: Projector,
    encoder: HashEncoder,
    config: TrainConfig,
) -> TrainResult:
    """Minibatch Adam over the dataset; deterministic given the seed.

    Loss log lines are "step<TAB>stage<TAB>total<TAB>rank<TAB>content<TAB>kl"
    with the kl column already weighted by alpha.
    """
    if not dataset:
        raise DataError("empty training dataset")
    if config.stage != stage:
        raise UsageError(f"config stage {config.stage!r} does not match {stage!r}")
    set_stage(stage, lm, projector, encoder)
    trainable = [p for p in (*lm.parameters(), *projector.parameters()) if p.trainable]
    adam = Adam()
    rng = make_rng(config.seed)
    losses: list[float] = []
    log_lines: list[str] = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(dataset), config.batch_size):
            batch = order[lo : lo + config.batch_size]
            for p in trainable:
                p.zero_grad()
            tot = rank = content = kl = 0.0
            try:
                for idx in batch:
                    sample = dataset[int(idx)]
                    if stage == STAGE_ALIGN:
                        loss = alignment_loss(lm, projector, sample)
                        tot += loss
                    else:
                        if config.shuffle_augment:
                            sample = augment_shuffle(sample, rng)
                        parts = combined_loss(lm, projector, sample, alpha=config.alpha)
                        tot += parts.total(config.alpha)
                        rank += parts.rank
                        content += parts.content
                        kl += config.alpha * parts.kl
            except NumericsError as exc:
                raise TrainingDiverged(step, f"numeric failure at step {step}: {exc}") from exc
            scale = 1.0 / len(batch)
            for p in trainable:
                p.grad *= scale
            tot, rank, content, kl = (x * scale for x in (tot, rank, content, kl))
            if not math.isfinite(tot):
                raise TrainingDiverged(step)
            clip_global_norm(trainable, config.clip_norm)
            adam.step(trainable, config.lr)
            losses.append(tot)
            log_lines.append(f"{step}\t{stage}\t{tot:.6f}\t{rank:.6f}\t{content:.6f}\t{kl:.6f}")
            step += 1
    return TrainResult(steps=step, losses=losses, log_lines=log_lines)


# ---------------------------------------------------------------------------
# Rank-training dataset file format
# ---------------------------------------------------------------------------


def write_rank_dataset(path, samples: list[RankSample]) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(
                json.dumps(
                    {
                        "query": {"id": s.query.id, "text": s.query.text},
                        "passages": [{"id": p.id, "text": p.text} for p in s.passages],
                        "golden": s.golden,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def read_rank_dataset(
    path, encoder: HashEncoder, lm: DecoderLm, content_max_tokens: int | None = None
) -> list[RankSample]:
    import json

    samples: list[RankSample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                query = Query(id=str(obj["query"]["id"]), text=obj["query"]["text"])
                passages = [Passage(id=str(p["id"]), text=p["text"]) for p in obj["passages"]]
                golden = [int(g) for g in obj["golden"]]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed rank sample: {exc}") from exc
            content = [lm.tokenize(p.text) for p in passages]
            if content_max_tokens is not None:
                content = [c[:content_max_tokens] for c in content]
            samples.append(
                RankSample(
                    query=query,
                    passages=passages,
                    embeddings=encoder.encode_batch([p.text for p in passages]),
                    content_ids=content,
                    golden=golden,
                )
            )
    if not samples:
        raise DataError(f"{path}: no samples")
    return samples
