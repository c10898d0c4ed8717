"""Experiment harnesses and exports built on top of training/evaluation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig
from .data import DataError, InteractionDataset, truncate_catalog
from .evaluation import evaluate
from .item_encoder import PIREncoder
from .model import build_for_dataset
from .nn import AdamW, Linear, Module
from .trainer import fit

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# attribute memorization
# ---------------------------------------------------------------------------


class _Probe(Module):
    def __init__(self, d_in: int, hidden: int, n_out: int, rng):
        self.hidden = Linear(d_in, hidden, rng)
        self.out = Linear(hidden, n_out, rng)

    def __call__(self, x):
        return self.out(T.leaky_relu(self.hidden(x)))


def memorization_probe(
    attributes: np.ndarray,
    item_ids=None,
    hidden_dim: int = 64,
    epochs: int = 300,
    lr: float = 1e-2,
    seed: int = 0,
) -> float:
    """Top-1 training accuracy of a 2-layer classifier from attributes to item id.

    High accuracy means the attributes alone tell items apart.
    """
    attributes = np.asarray(attributes, dtype=np.float64)
    n = attributes.shape[0]
    if n < 2:
        raise DataError("memorization probe needs at least two items")
    labels = np.arange(n) if item_ids is None else np.asarray(item_ids)
    classes, targets = np.unique(labels, return_inverse=True)
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        probe = _Probe(attributes.shape[1], hidden_dim, len(classes), rng)
        params = probe.parameters()
        opt = AdamW(learning_rate=lr)
        rows = np.arange(n)
        for _ in range(epochs):
            logp = T.log_softmax_rows(probe(attributes))
            loss = T.neg(T.mean(logp[rows, targets]))
            T.backward(loss)
            opt.step(params)
        with T.no_grad():
            logits = probe(attributes).values
    # identical rows give identical logits; count a tie as a miss
    best = logits.max(axis=1, keepdims=True)
    winners = (logits == best).sum(axis=1)
    hit = (logits[rows, targets] == best[:, 0]) & (winners == 1)
    return float(hit.mean())


# ---------------------------------------------------------------------------
# PCA via power iteration
# ---------------------------------------------------------------------------


@dataclass
class PCAResult:
    coordinates: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    degenerate: bool


def _top_eigenvector(cov: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    v = np.ones(cov.shape[0]) / np.sqrt(cov.shape[0])
    # a fixed start orthogonal to the top direction would stall; nudge it
    v = v + 1e-3 * np.arange(cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0:
            return v
        w /= norm
        if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
            return w
        v = w
    return v


def pca_project(vectors, components: int = 2, tol: float = 1e-9, max_iter: int = 10_000) -> PCAResult:
    """Project mean-centred rows onto their top principal directions."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("PCA needs at least two row vectors")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / (x.shape[0] - 1)
    if np.allclose(cov, 0.0):
        logger.warning("PCA input has zero variance")
        return PCAResult(np.zeros((x.shape[0], components)), np.zeros((components, x.shape[1])), np.zeros(components), True)
    dirs, variances = [], []
    work = cov.copy()
    for _ in range(components):
        v = _top_eigenvector(work, tol, max_iter)
        lam = float(v @ work @ v)
        dirs.append(v)
        variances.append(max(lam, 0.0))
        work = work - lam * np.outer(v, v)
    basis = np.array(dirs)
    return PCAResult(centred @ basis.T, basis, np.array(variances), False)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def train_and_evaluate(
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: InteractionDataset,
    split: str = "test",
    ks=(10,),
):
    model = build_for_dataset(model_config, dataset, train_config.seed, train_config.dropout, train_config.tau)
    result = fit(model, dataset, train_config)
    model.load_state_dict(result.best_state)
    report = evaluate(
        model,
        dataset,
        split,
        ks=ks,
        seed=train_config.seed,
        n_negatives=train_config.n_negatives_eval,
        max_len=train_config.max_len,
    )
    return model, report


def removal_experiment(
    dataset: InteractionDataset,
    ratios,
    encoder_kind: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> list[dict]:
    """Train/evaluate at each infrequent-item removal ratio.

    The full-table baseline collapses removed items onto an unknown row; the
    proxy encoder only loses frequent-item biases for removed items.
    """
    rows = []
    for ratio in ratios:
        if not 0.0 <= ratio <= 1.0:
            raise DataError(f"removal ratio {ratio} outside [0, 1]")
        if encoder_kind == "pir":
            cfg = dataclasses.replace(model_config, encoder="pir", removal_ratio=ratio)
        else:
            kind = "unknown" if ratio > 0 else "full_table"
            cfg = dataclasses.replace(model_config, encoder=kind, removal_ratio=ratio)
        model, report = train_and_evaluate(cfg, train_config, dataset)
        rows.append(
            {
                "ratio": ratio,
                "param_count": model.num_parameters(),
                "ndcg@10": report.ndcg[10],
                "hr@10": report.hr[10],
                "diversity": report.diversity,
                "per_group": report.per_group,
            }
        )
    return rows


def growth_experiment(
    dataset: InteractionDataset,
    model_configs: dict[str, ModelConfig],
    train_config: TrainConfig,
    partitions=(1, 2, 3, 4),
    n_parts: int = 4,
    train: bool = True,
) -> list[dict]:
    """Grow the catalog r/n_parts at a time and record size and quality."""
    rows = []
    for r in partitions:
        keep = int(round(r / n_parts * dataset.item_count))
        part = dataset if keep >= dataset.item_count else truncate_catalog(dataset, keep)
        # small partitions cannot supply the full negative pool
        pool = min(part.item_count - len(np.unique(s)) for s in part.sequences)
        part_config = dataclasses.replace(train_config, n_negatives_eval=min(train_config.n_negatives_eval, pool))
        for name, cfg in model_configs.items():
            row = {"r": r, "encoder": name, "items": part.item_count, "users": part.user_count,
                   "n_negatives_eval": part_config.n_negatives_eval}
            if train:
                model, report = train_and_evaluate(cfg, part_config, part)
                row["ndcg@10"] = report.ndcg[10]
            else:
                model = build_for_dataset(cfg, part, train_config.seed)
                row["ndcg@10"] = None
            row["param_count"] = model.num_parameters()
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def representative_contexts(dataset: InteractionDataset) -> np.ndarray:
    """Context of each item's latest occurrence; dataset mean if never seen."""
    out = np.tile(np.concatenate(dataset.contexts).mean(axis=0), (dataset.item_count, 1))
    latest = np.full(dataset.item_count, -np.inf)
    for seq, ts, ctx in zip(dataset.sequences, dataset.timestamps, dataset.contexts):
        for i, t, c in zip(seq, ts, ctx):
            if t >= latest[i]:
                latest[i] = t
                out[i] = c
    return out


def proxy_weight_table(encoder: PIREncoder, dataset: InteractionDataset) -> np.ndarray:
    ids = np.arange(dataset.item_count)
    with T.no_grad(), T.precision(np.float64):
        return encoder.proxy_weights(dataset.attributes, representative_contexts(dataset), ids).values


def pir_table(encoder: PIREncoder, dataset: InteractionDataset) -> np.ndarray:
    ids = np.arange(dataset.item_count)
    with T.no_grad(), T.precision(np.float64):
        return encoder.pir_vector(dataset.attributes, representative_contexts(dataset), ids).values


def item_vectors(encoder, dataset: InteractionDataset) -> np.ndarray:
    ids = np.arange(dataset.item_count)
    with T.no_grad(), T.precision(np.float64):
        return encoder(ids, dataset.attributes, representative_contexts(dataset)).values


def write_vector_tsv(path, rows: np.ndarray, header: str | None = None, ids=None) -> None:
    ids = np.arange(len(rows)) if ids is None else ids
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for i, row in zip(ids, rows):
            fh.write(f"{int(i)}\t{','.join(f'{v:.10g}' for v in row)}\n")


# ---------------------------------------------------------------------------
# representation properties
# ---------------------------------------------------------------------------


def locality_pair(g: float, eps: float, rest) -> tuple[np.ndarray, np.ndarray, float]:
    """Two logit vectors with equal partition function differing in the first two slots.

    ``f1 = [g, g, rest]`` and ``f2 = [g + eps, g - delta, rest]`` where delta
    keeps ``sum(exp(f))`` unchanged.  Returns ``(f1, f2, delta)``.
    """
    if not 0 < eps < np.log(2 - np.exp(-g)):
        raise ValueError("eps must lie in (0, log(2 - exp(-g)))")
    delta = -np.log(2 - np.exp(eps))
    rest = np.asarray(rest, dtype=np.float64)
    f1 = np.concatenate([[g, g], rest])
    f2 = np.concatenate([[g + eps, g - delta], rest])
    return f1, f2, float(delta)


def locality_bound(proxies: np.ndarray, g: float, eps: float, partition: float) -> float:
    """Upper bound on ``||softmax(f1) P - softmax(f2) P||`` for a locality pair."""
    spectral = np.linalg.norm(proxies, 2)
    return float(np.sqrt(2) * spectral * np.exp(g) / partition * np.sqrt(np.exp(2 * eps) - 2 * np.exp(eps) + 1))
