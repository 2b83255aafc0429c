"""The learned bridge between encoder space and LM input space.

A two-layer MLP whose outputs act as the input embeddings of
out-of-vocabulary special tokens, one per passage. Trainable in both
training stages; the frozen encoder behind it never receives gradients,
so the backward pass returns the input gradient without applying it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ACTIVATIONS,
    NumericsError,
    Parameter,
    linear_backward,
    linear_forward,
    make_rng,
    xavier_uniform,
)


@dataclass
class ProjectorCache:
    inputs: np.ndarray
    pre_activation: np.ndarray
    activated: np.ndarray


class Projector:
    """out = act(e @ W1 + b1) @ W2 + b2, mapping (d_enc,) -> (d_lm,)."""

    def __init__(
        self,
        d_enc: int,
        d_lm: int,
        d_hidden: int | None = None,
        activation: str = "gelu",
        seed: int = 0,
    ) -> None:
        if activation not in ACTIVATIONS:
            raise NumericsError(f"unknown activation {activation!r}")
        d_hidden = d_lm if d_hidden is None else d_hidden
        rng = make_rng(seed)
        self.d_enc = d_enc
        self.d_hidden = d_hidden
        self.d_lm = d_lm
        self.activation = activation
        self.w1 = Parameter("projector.w1", xavier_uniform(rng, d_enc, d_hidden))
        self.b1 = Parameter("projector.b1", np.zeros(d_hidden))
        self.w2 = Parameter("projector.w2", xavier_uniform(rng, d_hidden, d_lm))
        self.b2 = Parameter("projector.b2", np.zeros(d_lm))

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def project_batch(
        self, embeddings: np.ndarray, with_cache: bool = False
    ) -> tuple[np.ndarray, ProjectorCache | None]:
        """Project rows of ``embeddings`` (n, d_enc) to (n, d_lm)."""
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if emb.shape[1] != self.d_enc:
            raise NumericsError(
                f"projector dimension mismatch: input {emb.shape} vs d_enc {self.d_enc}"
            )
        act, _ = ACTIVATIONS[self.activation]
        pre = linear_forward(emb, self.w1, self.b1)
        hidden = act(pre)
        out = linear_forward(hidden, self.w2, self.b2)
        if not np.all(np.isfinite(out)):
            raise NumericsError("projector produced non-finite output")
        cache = ProjectorCache(emb, pre, hidden) if with_cache else None
        return out, cache

    def project(self, embedding: np.ndarray) -> np.ndarray:
        out, _ = self.project_batch(embedding[None, :])
        return out[0]

    def backward_batch(self, cache: ProjectorCache, dout: np.ndarray) -> np.ndarray:
        """Accumulate weight gradients; return the gradient w.r.t. the inputs.

        The returned input gradient stops here by contract: the encoder is
        frozen, so callers discard it.
        """
        _, act_grad = ACTIVATIONS[self.activation]
        dhidden = linear_backward(dout, cache.activated, self.w2, self.b2)
        dpre = dhidden * act_grad(cache.pre_activation)
        return linear_backward(dpre, cache.inputs, self.w1, self.b1)
