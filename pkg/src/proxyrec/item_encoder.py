"""Item encoders mapping (item id, attributes, context) to item vectors.

Three interchangeable encoders share one call signature
``encoder(ids, attributes, contexts) -> Tensor[..., d]``:

* :class:`FullTableEncoder` keeps one learned embedding row per item.
* :class:`UnknownTokenWrapper` collapses the least frequent items of a full
  table onto one shared unknown row.
* :class:`PIREncoder` replaces the table with a softmax-weighted mixture of a
  small bank of shared proxy embeddings, plus a learned logit bias for the
  ``K`` most frequent items.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Linear, Module, Parameter, xavier_uniform
from .tensor import ConfigError, Tensor


def rank_by_frequency(frequencies: np.ndarray) -> np.ndarray:
    """Item ids ordered from most to least frequent, ties by ascending id."""
    ids = np.arange(len(frequencies))
    return np.lexsort((ids, -np.asarray(frequencies)))


def _check_inputs(attributes, contexts, d_a: int, d_c: int):
    attributes = np.asarray(attributes, dtype=T.get_default_dtype())
    contexts = np.asarray(contexts, dtype=T.get_default_dtype())
    if attributes.shape[-1] != d_a:
        raise ConfigError(f"attribute dim {attributes.shape[-1]} != configured {d_a}")
    if contexts.shape[-1] != d_c:
        raise ConfigError(f"context dim {contexts.shape[-1]} != configured {d_c}")
    return attributes, contexts


class FullTableEncoder(Module):
    """One embedding row per item, concatenated with an attribute/context code."""

    def __init__(
        self,
        n_rows: int,
        d: int,
        d_a: int,
        d_c: int,
        rng: np.random.Generator,
        d_ie: int | None = None,
        d_ac: int | None = None,
        sigma_ac: str = "leaky_relu",
        sigma_item: str = "leaky_relu",
    ):
        d_ie = d_ie or d
        d_ac = d_ac or d
        self.d, self.d_a, self.d_c, self.d_ie, self.d_ac = d, d_a, d_c, d_ie, d_ac
        self.n_rows = n_rows
        self.table = Parameter(xavier_uniform(rng, n_rows, d_ie))
        self.ac = Linear(d_a + d_c, d_ac, rng)
        self.item = Linear(d_ie + d_ac, d, rng)
        self.sigma_ac = T.activation(sigma_ac)
        self.sigma_item = T.activation(sigma_item)

    def rows_for(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.n_rows):
            raise LookupError("item id outside the embedding table")
        return ids

    def __call__(self, ids, attributes, contexts) -> Tensor:
        attributes, contexts = _check_inputs(attributes, contexts, self.d_a, self.d_c)
        rows = self.rows_for(ids)
        z = self.sigma_ac(self.ac(np.concatenate([attributes, contexts], axis=-1)))
        emb = T.take_rows(self.table, rows)
        return self.sigma_item(self.item(T.concat_cols([emb, z])))

    def closed_form_count(self) -> int:
        return (
            self.n_rows * self.d_ie
            + (self.d_a + self.d_c) * self.d_ac
            + self.d_ac
            + (self.d_ie + self.d_ac) * self.d
            + self.d
        )

    def embedding_count(self) -> int:
        return self.n_rows * self.d_ie


class UnknownTokenWrapper(Module):
    """Full table where the rarest ``floor(ratio * |I|)`` items share one row."""

    def __init__(self, frequencies: np.ndarray, removal_ratio: float, **table_kwargs):
        if not 0.0 <= removal_ratio <= 1.0:
            raise ConfigError("removal_ratio must be in [0, 1]")
        item_count = len(frequencies)
        self.item_count = item_count
        self.removal_ratio = removal_ratio
        n_replaced = int(np.floor(removal_ratio * item_count))
        order = rank_by_frequency(frequencies)
        self.replaced = np.sort(order[item_count - n_replaced:]) if n_replaced else np.zeros(0, np.int64)
        kept = np.sort(order[: item_count - n_replaced])
        self.row_of = np.full(item_count, -1, dtype=np.int64)
        self.row_of[kept] = np.arange(len(kept))
        self.unknown_row = len(kept) if n_replaced else None
        if n_replaced:
            self.row_of[self.replaced] = self.unknown_row
        n_rows = len(kept) + (1 if n_replaced else 0)
        self.inner = FullTableEncoder(n_rows, **table_kwargs)

    def rows_for(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if np.any(ids < 0):
            raise LookupError("negative item id")
        outside = ids >= self.item_count
        if np.any(outside) and self.unknown_row is None:
            raise LookupError("item id outside the catalog")
        rows = self.row_of[np.where(outside, 0, ids)]
        return np.where(outside, self.unknown_row if self.unknown_row is not None else -1, rows)

    def __call__(self, ids, attributes, contexts) -> Tensor:
        return self.inner(self.rows_for(ids), attributes, contexts)

    def closed_form_count(self) -> int:
        return self.inner.closed_form_count()

    def embedding_count(self) -> int:
        return self.inner.embedding_count()


class ProxyBank(Module):
    """Proxy embeddings plus per-item logit biases for the top-K items."""

    def __init__(self, n_proxy: int, d_proxy: int, frequent_items, rng: np.random.Generator):
        self.n_proxy, self.d_proxy = n_proxy, d_proxy
        self.proxies = Parameter(xavier_uniform(rng, n_proxy, d_proxy))
        self.frequent_items = np.asarray(frequent_items, dtype=np.int64)
        k = len(self.frequent_items)
        size = int(self.frequent_items.max()) + 1 if k else 0
        self._lookup = np.full(size, -1, dtype=np.int64)
        self._lookup[self.frequent_items] = np.arange(k)
        if k:
            self.freq_bias = Parameter(np.zeros((k, n_proxy), dtype=T.get_default_dtype()), decay_exempt=True)

    @property
    def k(self) -> int:
        return len(self.frequent_items)

    def bias_rows(self, ids) -> np.ndarray:
        """Bias row per id, -1 where the item has no bias (incl. cold items)."""
        ids = np.asarray(ids, dtype=np.int64)
        inside = (ids >= 0) & (ids < len(self._lookup))
        return np.where(inside, self._lookup[np.where(inside, ids, 0)] if len(self._lookup) else -1, -1)

    def closed_form_count(self) -> int:
        return self.n_proxy * self.d_proxy + self.k * self.n_proxy


def mix_proxies(weights: Tensor, proxies: Tensor) -> Tensor:
    """Weighted sum of proxy rows: ``weights @ proxies`` over the last axis."""
    weights = T.as_tensor(weights)
    if weights.ndim == 1:
        return T.reshape(T.matmul(T.reshape(weights, (1, -1)), proxies), (-1,))
    return T.matmul(weights, proxies)


class PIREncoder(Module):
    """Proxy-based item representation encoder.

    The proxy weight network is Linear -> LeakyReLU -> Linear (identity
    output); its logits, shifted by the item's frequent-item bias when it
    has one, go through a softmax and mix the proxy rows.  The mixture is
    then joined with the attribute/context code exactly like the full-table
    encoder joins an embedding row.
    """

    def __init__(
        self,
        d: int,
        d_a: int,
        d_c: int,
        n_proxy: int,
        frequent_items,
        rng: np.random.Generator,
        d_proxy: int | None = None,
        d_phi: int | None = None,
        d_a_prime: int | None = None,
        d_ac: int | None = None,
        sigma_a: str = "leaky_relu",
        sigma_ac: str = "leaky_relu",
        sigma_item: str = "leaky_relu",
    ):
        d_proxy = d_proxy or d
        d_phi = d_phi or d
        d_a_prime = d_a_prime or d
        d_ac = d_ac or d
        self.d, self.d_a, self.d_c = d, d_a, d_c
        self.d_proxy, self.d_phi, self.d_a_prime, self.d_ac = d_proxy, d_phi, d_a_prime, d_ac
        self.bank = ProxyBank(n_proxy, d_proxy, frequent_items, rng)
        self.phi1 = Linear(d_a + d_c, d_phi, rng)
        self.phi2 = Linear(d_phi, n_proxy, rng)
        self.attr = Linear(d_a, d_a_prime, rng)
        self.ac = Linear(d_a_prime + d_c, d_ac, rng)
        self.item = Linear(d_proxy + d_ac, d, rng)
        self.sigma_a = T.activation(sigma_a)
        self.sigma_ac = T.activation(sigma_ac)
        self.sigma_item = T.activation(sigma_item)

    @property
    def n_proxy(self) -> int:
        return self.bank.n_proxy

    def proxy_logits(self, attributes, contexts, ids=None) -> Tensor:
        attributes, contexts = _check_inputs(attributes, contexts, self.d_a, self.d_c)
        hidden = T.leaky_relu(self.phi1(np.concatenate([attributes, contexts], axis=-1)))
        logits = self.phi2(hidden)
        if ids is not None and self.bank.k:
            rows = self.bank.bias_rows(np.broadcast_to(ids, attributes.shape[:-1]))
            logits = T.add(logits, T.take_rows(self.bank.freq_bias, rows))
        return logits

    def proxy_weights(self, attributes, contexts, ids=None) -> Tensor:
        return T.softmax_rows(self.proxy_logits(attributes, contexts, ids))

    def pir_vector(self, attributes, contexts, ids=None) -> Tensor:
        return mix_proxies(self.proxy_weights(attributes, contexts, ids), self.bank.proxies)

    def __call__(self, ids, attributes, contexts) -> Tensor:
        attributes, contexts = _check_inputs(attributes, contexts, self.d_a, self.d_c)
        pir = self.pir_vector(attributes, contexts, ids)
        f_prime = self.sigma_a(self.attr(attributes))
        z = self.sigma_ac(self.ac(T.concat_cols([f_prime, contexts])))
        return self.sigma_item(self.item(T.concat_cols([pir, z])))

    def closed_form_count(self) -> int:
        d_in = self.d_a + self.d_c
        phi = d_in * self.d_phi + self.d_phi + self.d_phi * self.n_proxy + self.n_proxy
        attr = self.d_a * self.d_a_prime + self.d_a_prime
        ac = (self.d_a_prime + self.d_c) * self.d_ac + self.d_ac
        item = (self.d_proxy + self.d_ac) * self.d + self.d
        return self.bank.closed_form_count() + phi + attr + ac + item

    def embedding_count(self) -> int:
        return self.bank.closed_form_count()


def count_parameters(module: Module) -> int:
    """Number of trainable scalars."""
    return module.num_parameters()


def pir_shrinks(item_count: int, d: int, alpha: float, m_full: int, m_pir: int) -> bool:
    """Predicted ``|I| d + M > (|I| + d) alpha d + M'`` via the alpha threshold.

    Uses the rearranged form ``(|I| + (M - M') / d) / (|I| + d) > alpha``
    which is exact when ``K = |I|`` and every latent width equals ``d``.
    """
    return (item_count + (m_full - m_pir) / d) / (item_count + d) > alpha


def build_encoder(config, item_count: int, d_a: int, d_c: int, frequencies: np.ndarray, rng):
    """Construct the encoder named by ``config.encoder`` (a ModelConfig)."""
    if config.encoder == "pir":
        ranked = rank_by_frequency(frequencies)
        k = config.k
        if config.removal_ratio > 0:
            # removed items cannot carry a memorised bias
            k = min(k, item_count - int(np.floor(config.removal_ratio * item_count)))
        return PIREncoder(
            config.d,
            d_a,
            d_c,
            config.n_proxy,
            np.sort(ranked[:k]),
            rng,
            d_proxy=config.d_proxy,
            d_phi=config.d_phi,
            d_a_prime=config.d_a_prime,
            d_ac=config.d_ac,
            sigma_a=config.sigma_a,
            sigma_ac=config.sigma_ac,
            sigma_item=config.sigma_item,
        )
    table_kwargs = dict(
        d=config.d,
        d_a=d_a,
        d_c=d_c,
        rng=rng,
        d_ie=config.d_ie,
        d_ac=config.d_ac,
        sigma_ac=config.sigma_ac,
        sigma_item=config.sigma_item,
    )
    if config.encoder == "full_table":
        return FullTableEncoder(item_count, **table_kwargs)
    if config.encoder == "unknown":
        return UnknownTokenWrapper(frequencies, config.removal_ratio, **table_kwargs)
    raise ConfigError(f"unknown encoder {config.encoder!r}")
