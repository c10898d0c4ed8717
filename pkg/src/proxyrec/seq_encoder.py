"""Stacked multi-head self-attention over item vectors, no positions."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Norm, Parameter, xavier_uniform
from .tensor import ConfigError, ContractError, DropoutStream, Tensor


def attention(q, k, v, mask=None) -> Tensor:
    """softmax(q k^T / sqrt(d_qk)) v over the last two axes.

    ``mask`` marks valid keys, shape broadcastable to ``(..., L_q, L_k)``;
    invalid keys get zero weight.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ConfigError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ConfigError("keys and values must have the same length")
    logits = T.scale(T.matmul(q, T.swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    return T.matmul(T.softmax_rows(logits, mask), v)


class MultiHeadAttention(Module):
    """Heads are column blocks of W^Q, W^K, W^V; outputs are concatenated."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ConfigError(f"heads={heads} must divide d={d}")
        self.d, self.heads = d, heads
        dh = d // heads
        # per-head blocks initialised with their own fan-out
        self.w_q = Parameter(np.concatenate([xavier_uniform(rng, d, dh) for _ in range(heads)], axis=1))
        self.w_k = Parameter(np.concatenate([xavier_uniform(rng, d, dh) for _ in range(heads)], axis=1))
        self.w_v = Parameter(np.concatenate([xavier_uniform(rng, d, dh) for _ in range(heads)], axis=1))

    def _split(self, x: Tensor) -> Tensor:
        *lead, length, _ = x.shape
        x = T.reshape(x, (*lead, length, self.heads, self.d // self.heads))
        n = len(lead)
        return T.transpose(x, (*range(n), n + 1, n, n + 2))

    def _merge(self, x: Tensor) -> Tensor:
        *lead, heads, length, dh = x.shape
        n = len(lead)
        x = T.transpose(x, (*range(n), n + 1, n, n + 2))
        return T.reshape(x, (*lead, length, heads * dh))

    def __call__(self, q, k, v, key_mask=None, causal: bool = False) -> Tensor:
        """``key_mask``: boolean ``(..., L_k)`` marking valid keys."""
        qh = self._split(T.matmul(q, self.w_q))
        kh = self._split(T.matmul(k, self.w_k))
        vh = self._split(T.matmul(v, self.w_v))
        mask = None
        if key_mask is not None:
            key_mask = np.asarray(key_mask, dtype=bool)
            mask = key_mask[..., None, None, :]
        if causal:
            lq, lk = qh.shape[-2], kh.shape[-2]
            tri = np.tril(np.ones((lq, lk), dtype=bool))
            mask = tri if mask is None else mask & tri
        return self._merge(attention(qh, kh, vh, mask))


class AttentionBlock(Module):
    """Pre-norm block: A = MHA(norm(X)); out = PWFF(A) + A."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, norm: str = "layer_norm", dropout: float = 0.0):
        self.norm = Norm(d, norm)
        self.mha = MultiHeadAttention(d, heads, rng)
        self.ff1 = Linear(d, d, rng)
        self.ff2 = Linear(d, d, rng)
        self.dropout = dropout

    def pwff(self, x) -> Tensor:
        return self.ff2(T.leaky_relu(self.ff1(x)))

    def __call__(self, x, mask=None, causal=False, drops: DropoutStream | None = None) -> Tensor:
        h = self.norm(x)
        attended = self.mha(h, h, h, key_mask=mask, causal=causal)
        if drops is not None and self.training:
            attended = T.dropout(attended, self.dropout, drops.next_seed())
        ff = self.pwff(attended)
        if drops is not None and self.training:
            ff = T.dropout(ff, self.dropout, drops.next_seed())
        return T.add(ff, attended)


class SequenceEncoder(Module):
    def __init__(
        self,
        d: int,
        heads: int,
        blocks: int,
        rng: np.random.Generator,
        norm: str = "layer_norm",
        dropout: float = 0.0,
        causal: bool = False,
    ):
        self.blocks = [AttentionBlock(d, heads, rng, norm, dropout) for _ in range(blocks)]
        self.causal = causal

    def __call__(self, item_vectors, mask=None, drops: DropoutStream | None = None) -> Tensor:
        """Latent sequence vectors for ``(..., L, d)`` inputs; ``mask`` marks valid rows."""
        x = T.as_tensor(item_vectors)
        if x.ndim < 2 or x.shape[-2] == 0:
            raise ContractError("cannot encode an empty sequence")
        for block in self.blocks:
            x = block(x, mask, self.causal, drops)
        return x


def encode_sequence(item_vectors, blocks: SequenceEncoder, mask=None) -> Tensor:
    return blocks(item_vectors, mask)
