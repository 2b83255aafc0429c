"""A miniature decoder-only transformer and the assembly of mixed inputs.

The model consumes sequences of d_lm vectors directly, which lets projected
passage embeddings sit in the input stream as if they were the embeddings of
extra out-of-vocabulary special tokens. Blocks are pre-norm residual
(attention then MLP) with a final layer norm; positions get learned absolute
vectors, special positions included. Gradients are hand-derived layer by
layer; there is no autodiff graph.

Two forward paths exist and must agree: ``forward_full`` over a whole
sequence (training, prefill) and ``DecoderSession.append`` which extends a
cached sequence one position at a time (decoding). Causality makes the
incremental path exact: a position's hidden state never depends on anything
appended after it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError
from .kernels import causal_mha_backward, causal_mha_forward, step_attention
from .numerics import (
    Parameter,
    gelu,
    gelu_grad,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    make_rng,
    xavier_uniform,
)
from .templates import ALIGN_TEMPLATES, RankTemplate
from .text import tokenize

ORIGIN_INSTRUCTION = "instruction-token"
ORIGIN_QUERY = "query-token"
ORIGIN_PASSAGE = "passage-special"
ORIGIN_CONTENT = "content-token"
ORIGIN_RANKED = "ranked-special"

PREFIX_GOLDEN = "golden"
PREFIX_PREDICTED = "predicted"


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int = 2048
    d_lm: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_seq: int = 512
    ln_eps: float = 1e-5
    # Tie the vocabulary head to the token table. With a random frozen LM the
    # untied head makes text-reconstruction training useless as a warm start
    # (the projector learns to drive an arbitrary readout); tying couples the
    # reconstruction objective to the same token geometry that ranking dot
    # products later read, which is measurably what makes the alignment stage
    # transfer at this scale.
    tie_vocab_head: bool = True

    def __post_init__(self) -> None:
        if self.d_lm % self.n_heads != 0:
            raise UsageError(f"d_lm {self.d_lm} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 2:
            raise UsageError("vocab_size must be at least 2")

    @property
    def bos_id(self) -> int:
        # Last vocabulary row is reserved for the beginning-of-sequence token.
        return self.vocab_size - 1

    @property
    def hash_space(self) -> int:
        return self.vocab_size - 1


@dataclass
class MixedInputSequence:
    """Ordered LM-space vectors with per-position bookkeeping.

    ``origin`` tags each position (instruction/query token, passage special,
    content token, ranked special); ``passage_of`` carries the candidate
    index for special positions; ``token_ids`` the vocabulary id for token
    positions; ``provenance`` records, for ranked specials, whether the
    prefix came from golden labels (training) or the model's own predictions
    (inference).
    """

    vectors: np.ndarray
    origin: list[str] = field(default_factory=list)
    passage_of: list[int | None] = field(default_factory=list)
    token_ids: list[int | None] = field(default_factory=list)
    provenance: list[str | None] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    def append_vector(
        self,
        vec: np.ndarray,
        origin: str,
        passage_of: int | None = None,
        token_id: int | None = None,
        provenance: str | None = None,
    ) -> None:
        self.vectors = np.vstack([self.vectors, vec[None, :]])
        self.origin.append(origin)
        self.passage_of.append(passage_of)
        self.token_ids.append(token_id)
        self.provenance.append(provenance)

    def special_positions(self) -> list[tuple[int, int]]:
        """(position, candidate index) for every passage-special position."""
        return [
            (pos, cand)
            for pos, (tag, cand) in enumerate(zip(self.origin, self.passage_of))
            if tag == ORIGIN_PASSAGE and cand is not None
        ]


class _SequenceBuilder:
    def __init__(self, d_lm: int) -> None:
        self.d_lm = d_lm
        self.rows: list[np.ndarray] = []
        self.origin: list[str] = []
        self.passage_of: list[int | None] = []
        self.token_ids: list[int | None] = []
        self.provenance: list[str | None] = []

    def add(
        self,
        vec: np.ndarray,
        origin: str,
        passage_of: int | None = None,
        token_id: int | None = None,
    ) -> None:
        self.rows.append(vec)
        self.origin.append(origin)
        self.passage_of.append(passage_of)
        self.token_ids.append(token_id)
        self.provenance.append(None)

    def freeze(self) -> MixedInputSequence:
        vectors = np.stack(self.rows) if self.rows else np.zeros((0, self.d_lm))
        return MixedInputSequence(
            vectors, self.origin, self.passage_of, self.token_ids, self.provenance
        )


class DecoderLm:
    """Decoder-only transformer over d_lm vectors with a vocabulary head.

    The vocabulary head (no bias, untied from the token table) is only used
    by the alignment stage; ranking scores come from dot products between
    hidden states and projected passage embeddings instead.
    """

    def __init__(self, cfg: LmConfig, seed: int = 0) -> None:
        self.cfg = cfg
        rng = make_rng(seed)
        d = cfg.d_lm
        self.token_table = Parameter("lm.token_table", rng.normal(0.0, 0.02, (cfg.vocab_size, d)))
        self.pos_table = Parameter("lm.pos_table", rng.normal(0.0, 0.02, (cfg.max_seq, d)))
        self.blocks: list[dict[str, Parameter]] = []
        for i in range(cfg.n_layers):
            blk = {
                "ln1_g": Parameter(f"lm.block{i}.ln1_g", np.ones(d)),
                "ln1_b": Parameter(f"lm.block{i}.ln1_b", np.zeros(d)),
                "wq": Parameter(f"lm.block{i}.wq", xavier_uniform(rng, d, d)),
                "bq": Parameter(f"lm.block{i}.bq", np.zeros(d)),
                "wk": Parameter(f"lm.block{i}.wk", xavier_uniform(rng, d, d)),
                "bk": Parameter(f"lm.block{i}.bk", np.zeros(d)),
                "wv": Parameter(f"lm.block{i}.wv", xavier_uniform(rng, d, d)),
                "bv": Parameter(f"lm.block{i}.bv", np.zeros(d)),
                "wo": Parameter(f"lm.block{i}.wo", xavier_uniform(rng, d, d)),
                "bo": Parameter(f"lm.block{i}.bo", np.zeros(d)),
                "ln2_g": Parameter(f"lm.block{i}.ln2_g", np.ones(d)),
                "ln2_b": Parameter(f"lm.block{i}.ln2_b", np.zeros(d)),
                "wf1": Parameter(f"lm.block{i}.wf1", xavier_uniform(rng, d, 4 * d)),
                "bf1": Parameter(f"lm.block{i}.bf1", np.zeros(4 * d)),
                "wf2": Parameter(f"lm.block{i}.wf2", xavier_uniform(rng, 4 * d, d)),
                "bf2": Parameter(f"lm.block{i}.bf2", np.zeros(d)),
            }
            self.blocks.append(blk)
        self.lnf_g = Parameter("lm.lnf_g", np.ones(d))
        self.lnf_b = Parameter("lm.lnf_b", np.zeros(d))
        self.vocab_head = (
            None
            if cfg.tie_vocab_head
            else Parameter("lm.vocab_head", rng.normal(0.0, 0.02, (d, cfg.vocab_size)))
        )

    def head_matrix(self) -> np.ndarray:
        """(d_lm, vocab) readout matrix; the token table transposed when tied."""
        if self.cfg.tie_vocab_head:
            return self.token_table.value.T
        return self.vocab_head.value

    def parameters(self) -> list[Parameter]:
        params = [self.token_table, self.pos_table]
        for blk in self.blocks:
            params.extend(blk.values())
        params.extend([self.lnf_g, self.lnf_b])
        if self.vocab_head is not None:
            params.append(self.vocab_head)
        return params

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def tokenize(self, text: str) -> list[int]:
        return tokenize(text, self.cfg.hash_space)

    def vocab_logits(self, h: np.ndarray) -> np.ndarray:
        """h @ head; h may be one vector or a stack of them."""
        return h @ self.head_matrix()

    # -- full-sequence forward/backward -------------------------------------

    def forward_full(self, vectors: np.ndarray) -> tuple[np.ndarray, dict]:
        length = vectors.shape[0]
        if length == 0:
            raise DataError("cannot run the LM on an empty sequence")
        if length > self.cfg.max_seq:
            raise DataError(f"sequence length {length} exceeds max_seq {self.cfg.max_seq}")
        eps = self.cfg.ln_eps
        x = vectors + self.pos_table.value[:length]
        cache: dict = {"length": length, "layers": []}
        for blk in self.blocks:
            ln1_out, ln1_cache = layernorm_forward(x, blk["ln1_g"], blk["ln1_b"], eps)
            q = linear_forward(ln1_out, blk["wq"], blk["bq"])
            k = linear_forward(ln1_out, blk["wk"], blk["bk"])
            v = linear_forward(ln1_out, blk["wv"], blk["bv"])
            attn, attw = causal_mha_forward(q, k, v, self.cfg.n_heads)
            x_attn = x + linear_forward(attn, blk["wo"], blk["bo"])
            ln2_out, ln2_cache = layernorm_forward(x_attn, blk["ln2_g"], blk["ln2_b"], eps)
            f = linear_forward(ln2_out, blk["wf1"], blk["bf1"])
            a = gelu(f)
            x = x_attn + linear_forward(a, blk["wf2"], blk["bf2"])
            cache["layers"].append(
                {
                    "ln1_out": ln1_out,
                    "ln1_cache": ln1_cache,
                    "q": q,
                    "k": k,
                    "v": v,
                    "attw": attw,
                    "attn": attn,
                    "ln2_out": ln2_out,
                    "ln2_cache": ln2_cache,
                    "f": f,
                    "a": a,
                }
            )
        hidden, lnf_cache = layernorm_forward(x, self.lnf_g, self.lnf_b, eps)
        cache["lnf_cache"] = lnf_cache
        return hidden, cache

    def backward_full(self, cache: dict, dhidden: np.ndarray) -> np.ndarray:
        """Accumulate trainable parameter grads; return grads w.r.t. the input vectors."""
        dx = layernorm_backward(dhidden, cache["lnf_cache"], self.lnf_g, self.lnf_b)
        for blk, lc in zip(reversed(self.blocks), reversed(cache["layers"])):
            da = linear_backward(dx, lc["a"], blk["wf2"], blk["bf2"])
            df = da * gelu_grad(lc["f"])
            dln2 = linear_backward(df, lc["ln2_out"], blk["wf1"], blk["bf1"])
            dx_attn = dx + layernorm_backward(dln2, lc["ln2_cache"], blk["ln2_g"], blk["ln2_b"])
            dattn = linear_backward(dx_attn, lc["attn"], blk["wo"], blk["bo"])
            dq, dk, dv = causal_mha_backward(
                dattn, lc["q"], lc["k"], lc["v"], lc["attw"], self.cfg.n_heads
            )
            dln1 = (
                linear_backward(dq, lc["ln1_out"], blk["wq"], blk["bq"])
                + linear_backward(dk, lc["ln1_out"], blk["wk"], blk["bk"])
                + linear_backward(dv, lc["ln1_out"], blk["wv"], blk["bv"])
            )
            dx = dx_attn + layernorm_backward(dln1, lc["ln1_cache"], blk["ln1_g"], blk["ln1_b"])
        self.pos_table.accumulate_rows(slice(0, cache["length"]), dx)
        return dx

    def new_session(self) -> "DecoderSession":
        return DecoderSession(self)


class DecoderSession:
    """Incremental decoding state: per-layer key/value caches, append-only.

    Appending never touches earlier cache entries, so previously returned
    hidden states are exactly what a from-scratch forward over the same
    prefix would produce.
    """

    def __init__(self, lm: DecoderLm) -> None:
        self.lm = lm
        self.length = 0
        d = lm.cfg.d_lm
        self._k = [np.empty((lm.cfg.max_seq, d)) for _ in lm.blocks]
        self._v = [np.empty((lm.cfg.max_seq, d)) for _ in lm.blocks]

    def prefill(self, vectors: np.ndarray) -> np.ndarray:
        """Process a whole prompt at once, filling the caches; returns all hidden states."""
        if self.length != 0:
            raise UsageError("prefill must be the first call on a session")
        length = vectors.shape[0]
        if length == 0:
            raise DataError("cannot prefill an empty sequence")
        if length > self.lm.cfg.max_seq:
            raise DataError(f"sequence length {length} exceeds max_seq {self.lm.cfg.max_seq}")
        cfg = self.lm.cfg
        x = vectors + self.lm.pos_table.value[:length]
        for li, blk in enumerate(self.lm.blocks):
            ln1_out, _ = layernorm_forward(x, blk["ln1_g"], blk["ln1_b"], cfg.ln_eps)
            q = linear_forward(ln1_out, blk["wq"], blk["bq"])
            k = linear_forward(ln1_out, blk["wk"], blk["bk"])
            v = linear_forward(ln1_out, blk["wv"], blk["bv"])
            self._k[li][:length] = k
            self._v[li][:length] = v
            attn, _ = causal_mha_forward(q, k, v, cfg.n_heads)
            x_attn = x + linear_forward(attn, blk["wo"], blk["bo"])
            ln2_out, _ = layernorm_forward(x_attn, blk["ln2_g"], blk["ln2_b"], cfg.ln_eps)
            x = x_attn + linear_forward(gelu(linear_forward(ln2_out, blk["wf1"], blk["bf1"])), blk["wf2"], blk["bf2"])
        hidden, _ = layernorm_forward(x, self.lm.lnf_g, self.lm.lnf_b, cfg.ln_eps)
        self.length = length
        return hidden

    def append(self, vector: np.ndarray) -> np.ndarray:
        """Extend the sequence by one vector; returns that position's hidden state."""
        if self.length >= self.lm.cfg.max_seq:
            raise DataError(f"sequence length {self.length + 1} exceeds max_seq {self.lm.cfg.max_seq}")
        cfg = self.lm.cfg
        t = self.length
        x = (vector + self.lm.pos_table.value[t])[None, :]
        for li, blk in enumerate(self.lm.blocks):
            ln1_out, _ = layernorm_forward(x, blk["ln1_g"], blk["ln1_b"], cfg.ln_eps)
            q = linear_forward(ln1_out, blk["wq"], blk["bq"])
            k = linear_forward(ln1_out, blk["wk"], blk["bk"])
            v = linear_forward(ln1_out, blk["wv"], blk["bv"])
            self._k[li][t] = k[0]
            self._v[li][t] = v[0]
            attn = step_attention(q[0], self._k[li][: t + 1], self._v[li][: t + 1], cfg.n_heads)
            x_attn = x + linear_forward(attn[None, :], blk["wo"], blk["bo"])
            ln2_out, _ = layernorm_forward(x_attn, blk["ln2_g"], blk["ln2_b"], cfg.ln_eps)
            x = x_attn + linear_forward(gelu(linear_forward(ln2_out, blk["wf1"], blk["bf1"])), blk["wf2"], blk["bf2"])
        hidden, _ = layernorm_forward(x, self.lm.lnf_g, self.lm.lnf_b, cfg.ln_eps)
        self.length = t + 1
        return hidden[0]


# ---------------------------------------------------------------------------
# Input assembly
# ---------------------------------------------------------------------------


def _emit_tokens(builder: _SequenceBuilder, lm: DecoderLm, text: str, origin: str) -> None:
    for tid in lm.tokenize(text):
        builder.add(lm.token_table.value[tid], origin, token_id=tid)


def _emit_mixed(builder: _SequenceBuilder, lm: DecoderLm, text: str, query_text: str) -> None:
    """Emit template text that may contain {query}, tagging query tokens."""
    parts = text.split("{query}")
    for idx, part in enumerate(parts):
        if idx > 0:
            _emit_tokens(builder, lm, query_text, ORIGIN_QUERY)
        _emit_tokens(builder, lm, part, ORIGIN_INSTRUCTION)


def rank_prompt_length(lm: DecoderLm, template: RankTemplate, query_text: str,
                       n: int, content_lens: list[int] | None = None) -> int:
    """Token count of the assembled rank prompt, without building vectors."""
    preamble = template.preamble.replace("{n}", str(n))
    epilogue = template.epilogue.replace("{n}", str(n))
    n_query = preamble.count("{query}") + epilogue.count("{query}")
    fixed = len(lm.tokenize(preamble.replace("{query}", ""))) + len(
        lm.tokenize(epilogue.replace("{query}", ""))
    )
    total = 1 + fixed + n_query * len(lm.tokenize(query_text)) + n
    if content_lens is not None:
        total += sum(content_lens)
    return total


def assemble_rank_input(
    lm: DecoderLm,
    projector,
    template: RankTemplate,
    query_text: str,
    embeddings: np.ndarray,
    include_content: bool = False,
    contents: list[list[int]] | list[str] | None = None,
    projected: np.ndarray | None = None,
    reserve: int = 0,
) -> MixedInputSequence:
    """Build the ranking prompt: BOS, instruction and query tokens, one
    projected special vector per candidate (plus content tokens when asked).

    ``reserve`` positions are kept free for vectors appended later during
    decoding or teacher forcing; the length check covers them too.
    """
    n = np.atleast_2d(embeddings).shape[0]
    if n < 1:
        raise UsageError("need at least one candidate")
    if include_content:
        if contents is None:
            raise UsageError("include_content=True requires contents")
        content_ids = [lm.tokenize(c) if isinstance(c, str) else list(c) for c in contents]
        if len(content_ids) != n:
            raise UsageError(f"{len(content_ids)} content entries for {n} candidates")
    else:
        content_ids = None
    if projected is None:
        projected, _ = projector.project_batch(embeddings)
    projected = np.atleast_2d(projected)

    builder = _SequenceBuilder(lm.cfg.d_lm)
    builder.add(lm.token_table.value[lm.cfg.bos_id], ORIGIN_INSTRUCTION, token_id=lm.cfg.bos_id)
    _emit_mixed(builder, lm, template.preamble.replace("{n}", str(n)), query_text)
    for i in range(n):
        block = template.passage_block
        before, after = block.split("{embedding}")
        _emit_tokens(builder, lm, before, ORIGIN_INSTRUCTION)
        builder.add(projected[i], ORIGIN_PASSAGE, passage_of=i)
        if "{content}" in after:
            pre_c, post_c = after.split("{content}")
            _emit_tokens(builder, lm, pre_c, ORIGIN_INSTRUCTION)
            for tid in content_ids[i]:
                builder.add(lm.token_table.value[tid], ORIGIN_CONTENT, passage_of=i, token_id=tid)
            _emit_tokens(builder, lm, post_c, ORIGIN_INSTRUCTION)
        else:
            _emit_tokens(builder, lm, after, ORIGIN_INSTRUCTION)
    _emit_mixed(builder, lm, template.epilogue.replace("{n}", str(n)), query_text)
    seq = builder.freeze()
    if seq.length + reserve > lm.cfg.max_seq:
        raise DataError(
            f"window too large: assembled length {seq.length} + {reserve} reserved "
            f"exceeds max_seq {lm.cfg.max_seq}"
        )
    return seq


def assemble_align_input(
    lm: DecoderLm,
    projected: np.ndarray,
    rng: np.random.Generator | None = None,
    template_idx: int | None = None,
) -> MixedInputSequence:
    """Build the reconstruction prompt: instruction tokens around exactly one
    projected text embedding. The instruction variant is drawn uniformly from
    the template pool via ``rng`` unless ``template_idx`` pins it.
    """
    if template_idx is None:
        if rng is None:
            raise UsageError("need rng or template_idx to pick an alignment prompt")
        template_idx = int(rng.integers(len(ALIGN_TEMPLATES)))
    if not 0 <= template_idx < len(ALIGN_TEMPLATES):
        raise UsageError(f"template_idx {template_idx} out of range")
    before, after = ALIGN_TEMPLATES[template_idx].split("{embedding}")
    builder = _SequenceBuilder(lm.cfg.d_lm)
    builder.add(lm.token_table.value[lm.cfg.bos_id], ORIGIN_INSTRUCTION, token_id=lm.cfg.bos_id)
    _emit_tokens(builder, lm, before, ORIGIN_INSTRUCTION)
    builder.add(np.asarray(projected, dtype=np.float64), ORIGIN_PASSAGE, passage_of=0)
    _emit_tokens(builder, lm, after, ORIGIN_INSTRUCTION)
    return builder.freeze()
