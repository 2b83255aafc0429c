"""Embedding-compressed listwise passage reranking at desk scale.

A frozen hashing encoder compresses each passage into one vector; a
trainable two-layer projector turns that vector into the input embedding of
a single special token; a miniature decoder-only LM ranks candidates by
greedily decoding over the shrinking set of those special tokens. Training
runs in two stages (projector alignment via text reconstruction, then
listwise learning-to-rank with content and KL terms); BM25/dense retrieval,
TREC-style evaluation, and a token/latency accountant complete the two-stage
ranking pipeline.
"""

__version__ = "0.1.0"

from .decoding import RankingList, WindowSchedule, dc_decode, sliding_window_rerank
from .evaluation import CostModel, Qrels, Run, TokenStats, ndcg_at_k, paired_ttest, predict_cost
from .kernels import active_backend
from .lm import DecoderLm, LmConfig, MixedInputSequence
from .projector import Projector
from .retrieval import Bm25Index, HashEncoder, Passage, Query, Retriever, VectorIndex
from .training import (
    AlignmentSample,
    RankSample,
    TrainConfig,
    alignment_loss,
    combined_loss,
    content_rank_loss,
    kl_distill_loss,
    listmle_rank_loss,
    train,
)

__all__ = [
    "AlignmentSample",
    "Bm25Index",
    "CostModel",
    "DecoderLm",
    "HashEncoder",
    "LmConfig",
    "MixedInputSequence",
    "Passage",
    "Projector",
    "Qrels",
    "Query",
    "RankingList",
    "RankSample",
    "Retriever",
    "Run",
    "TokenStats",
    "TrainConfig",
    "VectorIndex",
    "WindowSchedule",
    "active_backend",
    "alignment_loss",
    "combined_loss",
    "content_rank_loss",
    "dc_decode",
    "kl_distill_loss",
    "listmle_rank_loss",
    "ndcg_at_k",
    "paired_ttest",
    "predict_cost",
    "sliding_window_rerank",
    "train",
]
