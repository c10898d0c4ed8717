"""Full recommender: item encoder -> attention blocks -> candidate scorer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .data import CONTEXT_DIM, InteractionDataset
from .item_encoder import build_encoder
from .nn import Module
from .scorer import CrossAttentionScorer, bce_loss, lip_loss, score_inner_product
from .seq_encoder import SequenceEncoder
from .tensor import DropoutStream, Tensor


@dataclass
class Batch:
    """Padded model inputs; candidate column 0 is the positive."""

    users: np.ndarray
    seq_ids: np.ndarray
    seq_attr: np.ndarray
    seq_ctx: np.ndarray
    mask: np.ndarray
    cand_ids: np.ndarray
    cand_attr: np.ndarray
    cand_ctx: np.ndarray

    @property
    def size(self) -> int:
        return len(self.users)


@dataclass
class Example:
    user: int
    positions: np.ndarray  # source positions of the input events
    input_ids: np.ndarray
    target_pos: int
    target_id: int
    negatives: np.ndarray


def make_batch(dataset: InteractionDataset, examples: list[Example]) -> Batch:
    n = len(examples)
    length = max(len(e.input_ids) for e in examples)
    m = 1 + len(examples[0].negatives)
    d_a = dataset.attribute_dim
    seq_ids = np.zeros((n, length), dtype=np.int64)
    seq_ctx = np.zeros((n, length, CONTEXT_DIM))
    mask = np.zeros((n, length), dtype=bool)
    cand_ids = np.zeros((n, m), dtype=np.int64)
    cand_ctx = np.zeros((n, m, CONTEXT_DIM))
    for row, e in enumerate(examples):
        ctx = dataset.contexts[e.user]
        k = len(e.input_ids)
        seq_ids[row, :k] = e.input_ids
        seq_ctx[row, :k] = ctx[e.positions]
        mask[row, :k] = True
        cand_ids[row, 0] = e.target_id
        cand_ids[row, 1:] = e.negatives
        cand_ctx[row] = ctx[e.target_pos]
    attrs = dataset.attributes
    return Batch(
        users=np.array([e.user for e in examples]),
        seq_ids=seq_ids,
        seq_attr=attrs[seq_ids].reshape(n, length, d_a),
        seq_ctx=seq_ctx,
        mask=mask,
        cand_ids=cand_ids,
        cand_attr=attrs[cand_ids].reshape(n, m, d_a),
        cand_ctx=cand_ctx,
    )


class SequentialRecommender(Module):
    def __init__(self, config: ModelConfig, encoder, sequence: SequenceEncoder, scorer=None, tau: float = 0.1):
        self.config = config
        self.encoder = encoder
        self.sequence = sequence
        self.scorer = scorer
        self.tau = tau

    @property
    def dtype(self):
        return np.float32 if self.config.precision == "float32" else np.float64

    def latents(self, batch: Batch, drops: DropoutStream | None = None) -> Tensor:
        items = self.encoder(batch.seq_ids, batch.seq_attr, batch.seq_ctx)
        return self.sequence(items, batch.mask, drops)

    def candidates(self, batch: Batch) -> Tensor:
        return self.encoder(batch.cand_ids, batch.cand_attr, batch.cand_ctx)

    def score(self, batch: Batch, drops: DropoutStream | None = None) -> Tensor:
        latents = self.latents(batch, drops)
        cands = self.candidates(batch)
        if self.config.scorer == "ca":
            return self.scorer(latents, cands, batch.mask)
        last = batch.mask.sum(axis=1) - 1
        user = latents[np.arange(batch.size), last]
        variant = "ntxent" if self.config.scorer == "ip_ntxent" else "bce"
        return score_inner_product(user, cands, variant, self.tau)

    def loss(self, scores: Tensor) -> Tensor:
        if self.config.scorer == "ca":
            return lip_loss(scores, self.tau)
        if self.config.scorer == "ip_ntxent":
            return lip_loss(scores)
        labels = np.zeros(scores.shape)
        labels[:, 0] = 1.0
        return bce_loss(scores, labels)

    def parameter_inventory(self) -> dict[str, int]:
        return {name: int(p.values.size) for name, p in self.named_parameters()}


def build_model(
    config: ModelConfig,
    item_count: int,
    attribute_dim: int,
    frequencies: np.ndarray,
    seed: int,
    dropout: float = 0.0,
    tau: float = 0.1,
) -> SequentialRecommender:
    config.validate(item_count)
    rng = np.random.default_rng(seed)
    with T.precision(config.precision):
        encoder = build_encoder(config, item_count, attribute_dim, CONTEXT_DIM, frequencies, rng)
        sequence = SequenceEncoder(config.d, config.heads, config.blocks, rng, config.norm, dropout, config.causal)
        scorer = CrossAttentionScorer(config.d, config.heads, rng) if config.scorer == "ca" else None
        model = SequentialRecommender(config, encoder, sequence, scorer, tau)
    model.parameters()  # assigns dotted names
    return model


def build_for_dataset(config: ModelConfig, dataset: InteractionDataset, seed: int, dropout=0.0, tau=0.1):
    return build_model(
        config,
        dataset.item_count,
        dataset.attribute_dim,
        dataset.item_frequencies("train"),
        seed,
        dropout,
        tau,
    )
