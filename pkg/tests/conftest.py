from __future__ import annotations

import numpy as np
import pytest

from embrank.lm import DecoderLm, LmConfig
from embrank.numerics import make_rng
from embrank.projector import Projector
from embrank.retrieval import HashEncoder, Passage, Query
from embrank.training import RankSample


TOY_TEXTS = [
    "alpha beta gamma delta epsilon",
    "zeta eta theta iota kappa",
    "alpha gamma epsilon kappa mu",
    "nu xi omicron pi rho sigma",
    "beta delta zeta theta lambda",
    "tau upsilon phi chi psi omega",
]


@pytest.fixture
def tiny_encoder() -> HashEncoder:
    return HashEncoder(dim=12, vocab_hash_size=64, seed=3)


@pytest.fixture
def tiny_lm() -> DecoderLm:
    cfg = LmConfig(vocab_size=48, d_lm=16, n_layers=2, n_heads=2, max_seq=160)
    return DecoderLm(cfg, seed=5)


@pytest.fixture
def tiny_projector(tiny_encoder, tiny_lm) -> Projector:
    return Projector(d_enc=tiny_encoder.dim, d_lm=tiny_lm.cfg.d_lm, seed=9)


def make_rank_sample(
    encoder: HashEncoder,
    lm: DecoderLm,
    n: int = 3,
    seed: int = 0,
    query_text: str = "alpha gamma",
    equal_embeddings: bool = False,
) -> RankSample:
    rng = make_rng(seed)
    passages = [
        Passage(id=f"p{i}", text=" ".join(TOY_TEXTS[(i + seed) % len(TOY_TEXTS)].split()))
        for i in range(n)
    ]
    if equal_embeddings:
        embeddings = np.tile(encoder.encode(passages[0].text), (n, 1))
    else:
        embeddings = encoder.encode_batch([p.text for p in passages])
    golden = list(rng.permutation(n))
    return RankSample(
        query=Query(id="q", text=query_text),
        passages=passages,
        embeddings=embeddings,
        content_ids=[lm.tokenize(p.text) for p in passages],
        golden=[int(g) for g in golden],
    )


def exhaustive_topk(matrix: np.ndarray, ids: list[str], qvec: np.ndarray, k: int):
    """Brute-force oracle for dense retrieval: score everything, sort, cut."""
    scored = [(float(matrix[i] @ qvec), ids[i]) for i in range(len(ids))]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(pid, score) for score, pid in scored[:k]]
