"""Leave-one-out ranking evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import DataError, InteractionDataset, eval_negatives, target_index
from .item_encoder import rank_by_frequency
from .model import Example, make_batch
from .tensor import ContractError


def rank_metrics(rank: int, k: int, n_candidates: int = 101) -> tuple[float, float]:
    """(HR@k, NDCG@k) for one relevant item at 1-based ``rank``."""
    if not 1 <= rank <= n_candidates:
        raise ContractError(f"rank {rank} outside 1..{n_candidates}")
    if rank > k:
        return 0.0, 0.0
    return 1.0, 1.0 / math.log2(rank + 1)


def pessimistic_rank(scores: np.ndarray) -> np.ndarray:
    """1-based rank of column 0; negatives scoring equal rank ahead of it."""
    scores = np.asarray(scores)
    return 1 + np.sum(scores[:, 1:] >= scores[:, :1], axis=1)


def diversity(top_lists, item_count: int) -> float:
    """Fraction of the catalog that appears in any recommendation list."""
    top_lists = list(top_lists)
    if not top_lists:
        raise ContractError("no recommendation lists")
    seen: set[int] = set()
    for row in top_lists:
        seen.update(int(i) for i in row)
    return len(seen) / item_count


@dataclass
class FrequencyGroups:
    group_of: np.ndarray
    masses: np.ndarray
    item_counts: np.ndarray

    @property
    def n_groups(self) -> int:
        return len(self.masses)


def frequency_groups(frequencies, n_groups: int = 10) -> FrequencyGroups:
    """Split items (most frequent first) into groups of equal occurrence mass.

    A greedy sweep closes group g once the running mass reaches
    ``(g + 1) * total / n_groups``; the last group takes the remainder.
    """
    frequencies = np.asarray(frequencies, dtype=np.int64)
    if len(frequencies) < n_groups:
        raise DataError(f"{len(frequencies)} items cannot fill {n_groups} groups")
    total = frequencies.sum()
    share = total / n_groups
    group_of = np.zeros(len(frequencies), dtype=np.int64)
    g, running = 0, 0
    for item in rank_by_frequency(frequencies):
        group_of[item] = g
        running += frequencies[item]
        if g < n_groups - 1 and running >= share * (g + 1):
            g += 1
    masses = np.bincount(group_of, weights=frequencies, minlength=n_groups).astype(np.int64)
    counts = np.bincount(group_of, minlength=n_groups)
    return FrequencyGroups(group_of, masses, counts)


@dataclass
class EvalReport:
    split: str
    users: int
    hr: dict[int, float]
    ndcg: dict[int, float]
    diversity: float
    per_group: list[dict] = field(default_factory=list)
    param_count: int = 0
    runtime_seconds: float = 0.0
    seed: int = 0
    config_hash: str = ""

    def metric(self, name: str, k: int) -> float:
        return getattr(self, name)[k]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hr"] = {f"@{k}": v for k, v in self.hr.items()}
        out["ndcg"] = {f"@{k}": v for k, v in self.ndcg.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class UserResults:
    """Raw per-user outcome of one evaluation pass."""

    users: np.ndarray
    targets: np.ndarray
    ranks: np.ndarray
    top_items: np.ndarray


def eval_examples(
    dataset: InteractionDataset, split: str, seed: int, n_negatives: int, max_len: int, users=None
) -> list[Example]:
    users = range(dataset.user_count) if users is None else users
    examples = []
    for u in users:
        seq = dataset.sequences[u]
        t = target_index(len(seq), split)
        positions = np.arange(max(0, t - max_len), t)
        negatives = eval_negatives(dataset, u, n_negatives, seed, split)
        examples.append(Example(u, positions, seq[positions], t, int(seq[t]), negatives))
    return examples


def score_users(
    model,
    dataset: InteractionDataset,
    split: str = "test",
    seed: int = 0,
    n_negatives: int = 100,
    max_len: int = 50,
    batch_size: int = 256,
    top_k: int = 10,
    score_fn=None,
) -> UserResults:
    """Rank each user's target among frozen negatives.

    ``score_fn(batch) -> (n, 1 + n_negatives)`` overrides the model, which
    lets tests plug in oracle or random scorers.
    """
    examples = eval_examples(dataset, split, seed, n_negatives, max_len)
    ranks, tops, targets = [], [], []
    if model is not None:
        model.eval()
    dtype = model.dtype if model is not None else np.float64
    with T.no_grad(), T.precision(dtype):
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            batch = make_batch(dataset, chunk)
            if score_fn is not None:
                scores = np.asarray(score_fn(batch))
            else:
                scores = model.score(batch).values
            ranks.append(pessimistic_rank(scores))
            order = np.argsort(-scores, axis=1, kind="stable")[:, :top_k]
            tops.append(np.take_along_axis(batch.cand_ids, order, axis=1))
            targets.append(batch.cand_ids[:, 0])
    return UserResults(
        users=np.arange(dataset.user_count),
        targets=np.concatenate(targets),
        ranks=np.concatenate(ranks),
        top_items=np.concatenate(tops),
    )


def evaluate(
    model,
    dataset: InteractionDataset,
    split: str = "test",
    ks=(5, 10),
    seed: int = 0,
    n_negatives: int = 100,
    max_len: int = 50,
    batch_size: int = 256,
    n_groups: int = 10,
    score_fn=None,
) -> EvalReport:
    """HR/NDCG at each k, catalog coverage of top-10 lists and per-group metrics."""
    start = time.perf_counter()
    for u, seq in enumerate(dataset.sequences):
        if dataset.item_count - len(np.unique(seq)) < n_negatives:
            raise DataError(f"user {u} has fewer than {n_negatives} candidate negatives")
    res = score_users(model, dataset, split, seed, n_negatives, max_len, batch_size, 10, score_fn)
    n_cand = n_negatives + 1
    hr, ndcg = {}, {}
    per_user = {}
    for k in ks:
        pairs = np.array([rank_metrics(int(r), k, n_cand) for r in res.ranks])
        hr[k] = float(pairs[:, 0].mean())
        ndcg[k] = float(pairs[:, 1].mean())
        per_user[k] = pairs
    report = EvalReport(
        split=split,
        users=len(res.ranks),
        hr=hr,
        ndcg=ndcg,
        diversity=diversity(res.top_items, dataset.item_count),
        param_count=model.num_parameters() if model is not None else 0,
        seed=seed,
    )
    if n_groups and dataset.item_count >= n_groups:
        report.per_group = group_breakdown(dataset, res, n_groups, n_cand)
    report.runtime_seconds = time.perf_counter() - start
    return report


def group_breakdown(dataset: InteractionDataset, res: UserResults, n_groups: int, n_cand: int, k: int = 10):
    groups = frequency_groups(dataset.item_frequencies("train"), n_groups)
    metrics = np.array([rank_metrics(int(r), k, n_cand) for r in res.ranks])
    target_group = groups.group_of[res.targets]
    out = []
    for g in range(n_groups):
        sel = target_group == g
        out.append(
            {
                "group": g,
                "item_count": int(groups.item_counts[g]),
                "occurrence_mass": int(groups.masses[g]),
                "test_count": int(sel.sum()),
                "hr": float(metrics[sel, 0].mean()) if sel.any() else 0.0,
                "ndcg": float(metrics[sel, 1].mean()) if sel.any() else 0.0,
            }
        )
    return out


def expected_uniform_ndcg(k: int = 10, n_candidates: int = 101) -> tuple[float, float]:
    """Mean and std of NDCG@k when the positive's rank is uniform."""
    vals = np.array([1.0 / math.log2(r + 1) if r <= k else 0.0 for r in range(1, n_candidates + 1)])
    return float(vals.mean()), float(vals.std())
