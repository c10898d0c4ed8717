"""Interaction data: loading, context features, splits, sampling, synthesis."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MIN_INTERACTIONS = 4
CONTEXT_DIM = 6


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


class SynthConfigError(ValueError):
    pass


@dataclass
class InteractionDataset:
    """Per-user chronological item sequences with item attributes.

    ``sequences[u]`` and ``timestamps[u]`` are aligned int arrays;
    ``contexts[u]`` holds one featurized context row per event.
    """

    item_count: int
    sequences: list[np.ndarray]
    timestamps: list[np.ndarray]
    attributes: np.ndarray
    attribute_kind: str = "dense"
    contexts: list[np.ndarray] = field(default_factory=list)
    user_tokens: list[str] = field(default_factory=list)
    item_tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.contexts:
            self.contexts = featurize_dataset_contexts(self.timestamps)

    @property
    def user_count(self) -> int:
        return len(self.sequences)

    @property
    def attribute_dim(self) -> int:
        return self.attributes.shape[1]

    @property
    def context_dim(self) -> int:
        return CONTEXT_DIM

    @property
    def interaction_count(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def positives(self, user: int) -> np.ndarray:
        return np.unique(self.sequences[user])

    def validate(self) -> None:
        for u, (seq, ts) in enumerate(zip(self.sequences, self.timestamps)):
            if len(seq) < MIN_INTERACTIONS:
                raise DataError(f"user {u} has only {len(seq)} interactions")
            if np.any(np.diff(ts) < 0):
                raise DataError(f"user {u} timestamps are not sorted")
            if np.any(seq >= self.item_count) or np.any(seq < 0):
                raise DataError(f"user {u} references an unknown item")
        if self.attributes.shape[0] != self.item_count:
            raise DataError("attribute table does not cover the catalog")

    def item_frequencies(self, split: str = "train") -> np.ndarray:
        """Occurrence count per item in the given split's inputs and targets."""
        counts = np.zeros(self.item_count, dtype=np.int64)
        for seq in self.sequences:
            part = seq[: train_end(len(seq))] if split == "train" else seq
            np.add.at(counts, part, 1)
        return counts


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def train_end(length: int) -> int:
    """Exclusive end of the train prefix under leave-one-out."""
    return length - 2


def split_indices(length: int) -> dict[str, int]:
    return {"train_end": length - 2, "valid": length - 2, "test": length - 1}


def target_index(length: int, split: str) -> int:
    """Position of the evaluation target; the input is every earlier event."""
    if split == "test":
        return length - 1
    if split == "valid":
        return length - 2
    if split == "train":
        return length - 3
    raise ValueError(f"unknown split {split!r}")


# ---------------------------------------------------------------------------
# contexts
# ---------------------------------------------------------------------------


def featurize_context(timestamp: float, min_year: int, max_year: int) -> np.ndarray:
    """[year_norm, month/12, day/31, weekday/7, hour/24, minute/60].

    Month and day are 1-based, weekday counts Monday as 0, and the year is
    scaled by ``(year - min_year) / (max_year - min_year + 1)``.
    """
    when = dt.datetime.fromtimestamp(float(timestamp), tz=dt.timezone.utc)
    return np.array(
        [
            (when.year - min_year) / (max_year - min_year + 1),
            when.month / 12,
            when.day / 31,
            when.weekday() / 7,
            when.hour / 24,
            when.minute / 60,
        ]
    )


def _year(timestamp: float) -> int:
    return dt.datetime.fromtimestamp(float(timestamp), tz=dt.timezone.utc).year


def featurize_dataset_contexts(timestamps: list[np.ndarray]) -> list[np.ndarray]:
    if not timestamps:
        return []
    flat = np.concatenate(timestamps) if timestamps else np.array([])
    if flat.size == 0:
        return [np.zeros((0, CONTEXT_DIM)) for _ in timestamps]
    min_year, max_year = _year(flat.min()), _year(flat.max())
    cache: dict[int, np.ndarray] = {}
    out = []
    for ts in timestamps:
        rows = []
        for t in ts:
            minute = int(t) // 60
            if minute not in cache:
                cache[minute] = featurize_context(minute * 60, min_year, max_year)
            rows.append(cache[minute])
        out.append(np.array(rows).reshape(len(ts), CONTEXT_DIM))
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------


def _read_rows(path: Path, n_fields: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != n_fields:
                raise ParseError(f"{path}:{lineno}: expected {n_fields} tab-separated fields")
            yield lineno, parts


def load_interactions(path, attributes_path=None, attribute_kind: str = "dense") -> InteractionDataset:
    """Read ``user<TAB>item<TAB>timestamp`` rows into a dataset.

    Users and items are re-indexed from zero in first-seen order, sequences
    are sorted by timestamp (file order breaks ties) and users with three or
    fewer interactions are dropped.
    """
    path = Path(path)
    raw: dict[str, list[tuple[float, int, str]]] = {}
    user_order: list[str] = []
    for order, (lineno, (user, item, stamp)) in enumerate(_read_rows(path, 3)):
        try:
            ts = float(stamp)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad timestamp {stamp!r}") from None
        if ts < 0:
            raise ParseError(f"{path}:{lineno}: negative timestamp")
        if user not in raw:
            raw[user] = []
            user_order.append(user)
        raw[user].append((ts, order, item))

    kept = [u for u in user_order if len(raw[u]) >= MIN_INTERACTIONS]
    if not kept:
        raise DataError(f"{path}: no users with at least {MIN_INTERACTIONS} interactions")

    item_index: dict[str, int] = {}
    sequences, timestamps = [], []
    for user in kept:
        events = sorted(raw[user], key=lambda e: (e[0], e[1]))
        ids = []
        for _, _, item in events:
            if item not in item_index:
                item_index[item] = len(item_index)
            ids.append(item_index[item])
        sequences.append(np.array(ids, dtype=np.int64))
        timestamps.append(np.array([e[0] for e in events], dtype=np.int64))
    item_tokens = list(item_index)

    if attributes_path is not None:
        attributes = load_attributes(attributes_path, item_index, attribute_kind)
    else:
        attributes = np.zeros((len(item_tokens), 1))
    return InteractionDataset(
        item_count=len(item_tokens),
        sequences=sequences,
        timestamps=timestamps,
        attributes=attributes,
        attribute_kind=attribute_kind,
        user_tokens=kept,
        item_tokens=item_tokens,
    )


def load_attributes(path, item_index: dict[str, int], kind: str = "dense") -> np.ndarray:
    """Dense rows ``item<TAB>v1,v2,...`` or multi-hot ``item<TAB>tag;tag``."""
    path = Path(path)
    rows: dict[int, object] = {}
    for lineno, (item, payload) in _read_rows(path, 2):
        if item not in item_index:
            continue
        if kind == "dense":
            try:
                rows[item_index[item]] = [float(v) for v in payload.split(",") if v != ""]
            except ValueError:
                raise ParseError(f"{path}:{lineno}: bad attribute vector") from None
        elif kind == "categorical-multihot":
            rows[item_index[item]] = [t for t in payload.split(";") if t]
        else:
            raise DataError(f"unknown attribute kind {kind!r}")
    missing = set(item_index.values()) - set(rows)
    if missing:
        raise DataError(f"{path}: {len(missing)} items lack attributes")
    n = len(item_index)
    if kind == "dense":
        widths = {len(v) for v in rows.values()}
        if len(widths) != 1:
            raise ParseError(f"{path}: attribute vectors have differing lengths {sorted(widths)}")
        return np.array([rows[i] for i in range(n)], dtype=np.float64)
    vocab = sorted({t for tags in rows.values() for t in tags})
    col = {t: j for j, t in enumerate(vocab)}
    out = np.zeros((n, max(len(vocab), 1)))
    for i, tags in rows.items():
        for t in tags:
            out[i, col[t]] = 1.0
    return out


def write_interactions(dataset: InteractionDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, (seq, ts) in enumerate(zip(dataset.sequences, dataset.timestamps)):
            user = dataset.user_tokens[u] if dataset.user_tokens else str(u)
            for i, t in zip(seq, ts):
                item = dataset.item_tokens[i] if dataset.item_tokens else str(i)
                fh.write(f"{user}\t{item}\t{int(t)}\n")


def write_attributes(dataset: InteractionDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(dataset.attributes):
            item = dataset.item_tokens[i] if dataset.item_tokens else str(i)
            fh.write(f"{item}\t{','.join(repr(float(v)) for v in row)}\n")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_negatives(
    dataset: InteractionDataset, user: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """``n`` distinct items the user never interacted with, uniformly."""
    owned = dataset.positives(user)
    pool = dataset.item_count - len(owned)
    if pool < n:
        raise DataError(f"user {user}: only {pool} candidate negatives for {n} requested")
    # rejection sampling is cheap while the pool dominates the catalog
    if n <= pool // 2:
        chosen: list[int] = []
        taken = set(owned.tolist())
        while len(chosen) < n:
            for item in rng.integers(0, dataset.item_count, size=2 * (n - len(chosen))):
                item = int(item)
                if item not in taken:
                    taken.add(item)
                    chosen.append(item)
                    if len(chosen) == n:
                        break
        return np.array(chosen, dtype=np.int64)
    candidates = np.setdiff1d(np.arange(dataset.item_count), owned)
    return rng.choice(candidates, size=n, replace=False).astype(np.int64)


def eval_negatives(dataset: InteractionDataset, user: int, n: int, seed: int, split: str) -> np.ndarray:
    """Negatives frozen per (seed, user, split) so rankings are reproducible."""
    code = {"valid": 1, "test": 2, "train": 3}[split]
    rng = np.random.default_rng([int(seed), int(user), code])
    return sample_negatives(dataset, user, n, rng)


def random_sequence_cut(length: int, rng: np.random.Generator, p_cut: float) -> int:
    """Number of leading events to keep; the last kept one is the target."""
    if length < 2:
        raise DataError("sequence cut needs at least two events")
    if p_cut > 0 and rng.random() < p_cut:
        return int(rng.integers(2, length + 1))
    return length


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    user_count: int = 200
    item_count: int = 100
    zipf_exponent: float = 1.2
    attribute_dim: int = 16
    cluster_count: int = 10
    min_interactions: int = 6
    max_interactions: int = 15
    attribute_noise: float = 0.3
    clusters_per_user: tuple[int, int] = (1, 3)
    start_year: int = 2015
    span_years: int = 3


def generate_synthetic(config: SynthConfig, seed: int) -> InteractionDataset:
    """Clustered long-tail corpus.

    Items belong to latent clusters and carry ``centroid + noise`` attributes.
    Popularity follows a Zipf law over a random item ranking; each user
    prefers a few clusters and draws distinct items inside them in
    proportion to popularity.  Timestamps increase along each sequence.
    """
    c = config
    if c.item_count < c.cluster_count or c.cluster_count < 1:
        raise SynthConfigError("need at least one item per cluster")
    if c.min_interactions < MIN_INTERACTIONS or c.max_interactions < c.min_interactions:
        raise SynthConfigError("bad interaction range")
    rng = np.random.default_rng(seed)

    clusters = rng.permutation(np.arange(c.item_count) % c.cluster_count)
    centroids = rng.normal(size=(c.cluster_count, c.attribute_dim))
    attributes = centroids[clusters] + c.attribute_noise * rng.normal(size=(c.item_count, c.attribute_dim))

    rank = rng.permutation(c.item_count) + 1
    popularity = rank.astype(np.float64) ** (-c.zipf_exponent)
    members = [np.flatnonzero(clusters == k) for k in range(c.cluster_count)]

    start = dt.datetime(c.start_year, 1, 1, tzinfo=dt.timezone.utc).timestamp()
    span = c.span_years * 365 * 86400
    sequences, timestamps = [], []
    lo, hi = c.clusters_per_user
    for _ in range(c.user_count):
        n_pref = int(rng.integers(lo, min(hi, c.cluster_count) + 1))
        preferred = rng.choice(c.cluster_count, size=n_pref, replace=False)
        pool = np.concatenate([members[k] for k in preferred])
        length = int(rng.integers(c.min_interactions, c.max_interactions + 1))
        if length > pool.size:
            # top up from the rest of the catalog when the clusters are small
            rest = np.setdiff1d(np.arange(c.item_count), pool)
            pool = np.concatenate([pool, rest])
        weights = popularity[pool] / popularity[pool].sum()
        items = rng.choice(pool, size=length, replace=False, p=weights)
        t0 = start + rng.random() * span
        gaps = rng.exponential(2 * 86400, size=length)
        ts = np.floor(t0 + np.cumsum(gaps)).astype(np.int64)
        sequences.append(items.astype(np.int64))
        timestamps.append(ts)

    return InteractionDataset(
        item_count=c.item_count,
        sequences=sequences,
        timestamps=timestamps,
        attributes=attributes,
        attribute_kind="dense",
        user_tokens=[f"u{u}" for u in range(c.user_count)],
        item_tokens=[f"i{i}" for i in range(c.item_count)],
    )


def item_clusters(config: SynthConfig, seed: int) -> np.ndarray:
    """Latent cluster of every item as drawn by :func:`generate_synthetic`."""
    rng = np.random.default_rng(seed)
    return rng.permutation(np.arange(config.item_count) % config.cluster_count)


def truncate_catalog(dataset: InteractionDataset, keep_items: int) -> InteractionDataset:
    """Keep items with id < ``keep_items`` and the interactions touching them."""
    sequences, timestamps, users = [], [], []
    for u, (seq, ts) in enumerate(zip(dataset.sequences, dataset.timestamps)):
        sel = seq < keep_items
        if sel.sum() >= MIN_INTERACTIONS:
            sequences.append(seq[sel])
            timestamps.append(ts[sel])
            users.append(u)
    if not sequences:
        raise DataError("truncation left no users")
    contexts = [dataset.contexts[u][seq < keep_items] for u, seq in zip(users, (dataset.sequences[u] for u in users))]
    return InteractionDataset(
        item_count=keep_items,
        sequences=sequences,
        timestamps=timestamps,
        attributes=dataset.attributes[:keep_items],
        attribute_kind=dataset.attribute_kind,
        contexts=contexts,
        user_tokens=[dataset.user_tokens[u] for u in users] if dataset.user_tokens else [],
        item_tokens=dataset.item_tokens[:keep_items],
    )


def dataset_stats(dataset: InteractionDataset) -> dict:
    users, items, inter = dataset.user_count, dataset.item_count, dataset.interaction_count
    unique_attrs = len({row.tobytes() for row in np.ascontiguousarray(dataset.attributes)})
    return {
        "users": users,
        "items": items,
        "interactions": inter,
        "density": inter / (users * items),
        "unique_attributes": unique_attrs,
        "duplicates": items / unique_attrs,
    }
