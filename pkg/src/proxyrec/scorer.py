"""Candidate scoring and training losses.

Candidates are stacked with the positive first: ``candidates[..., 0, :]``.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, Parameter, xavier_uniform
from .seq_encoder import MultiHeadAttention
from .tensor import ConfigError, ContractError, Tensor


def score_inner_product(user, candidates, variant: str = "bce", tau: float = 1.0) -> Tensor:
    """Scores of ``(..., M, d)`` candidates against ``(..., d)`` user vectors.

    ``bce`` returns raw inner products; ``ntxent`` returns cosine / tau.
    """
    user, candidates = T.as_tensor(user), T.as_tensor(candidates)
    if user.shape[-1] != candidates.shape[-1]:
        raise ConfigError("user and candidate dims differ")
    if variant == "ntxent":
        if tau <= 0:
            raise ConfigError("temperature must be positive")
        user = T.l2_normalize_rows(user)
        candidates = T.l2_normalize_rows(candidates)
    elif variant != "bce":
        raise ConfigError(f"unknown inner-product variant {variant!r}")
    u = T.reshape(user, (*user.shape[:-1], user.shape[-1], 1))
    scores = T.matmul(candidates, u)
    scores = T.reshape(scores, scores.shape[:-1])
    return T.scale(scores, 1.0 / tau) if variant == "ntxent" else scores


class CrossAttentionScorer(Module):
    """Candidates attend over the latent sequence, gated multiplicatively."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.mha = MultiHeadAttention(d, heads, rng)
        self.w_score = Parameter(xavier_uniform(rng, d, 1))
        self.b_score = Parameter(np.zeros(1, dtype=T.get_default_dtype()), decay_exempt=True)

    def __call__(self, latents, candidates, mask=None) -> Tensor:
        latents, candidates = T.as_tensor(latents), T.as_tensor(candidates)
        if latents.shape[-2] == 0:
            raise ContractError("latent sequence is empty")
        gated = T.mul(candidates, self.mha(candidates, latents, latents, key_mask=mask))
        scores = T.add(T.matmul(gated, self.w_score), self.b_score)
        return T.reshape(scores, scores.shape[:-1])


def score_cross_attention(latents, candidates, scorer: CrossAttentionScorer, mask=None) -> Tensor:
    return scorer(latents, candidates, mask)


def lip_loss(scores, temperature: float | None = None) -> Tensor:
    """Mean over users of -log softmax(scores)[positive]; positive is column 0."""
    scores = T.as_tensor(scores)
    if scores.shape[-1] < 2:
        raise ContractError("need the positive and at least one negative")
    if temperature is not None:
        scores = T.scale(scores, 1.0 / temperature)
    logp = T.log_softmax_rows(scores)
    return T.neg(T.mean(logp[..., 0]))


def bce_loss(scores, labels) -> Tensor:
    """Mean binary cross-entropy with logits, computed via softplus."""
    scores = T.as_tensor(scores)
    labels = np.asarray(labels, dtype=scores.dtype)
    if labels.shape != scores.shape:
        raise ContractError("labels and scores differ in shape")
    # -[y log s(x) + (1-y) log(1-s(x))] = softplus(x) - y x
    return T.mean(T.sub(T.softplus(scores), T.mul(scores, labels)))
