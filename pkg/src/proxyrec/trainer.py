"""Last-item-prediction training loop, early stopping and checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import InteractionDataset, random_sequence_cut, sample_negatives, train_end
from .evaluation import evaluate
from .model import Example, SequentialRecommender, make_batch
from .nn import AdamW
from .tensor import DropoutStream

logger = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Training hit a non-finite value; ``diagnostics`` holds norms."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def training_example(
    dataset: InteractionDataset, user: int, config: TrainConfig, rng: np.random.Generator
) -> Example:
    """Cut the train prefix, keep its last event as target, corrupt inputs."""
    seq = dataset.sequences[user]
    end = train_end(len(seq))
    keep = random_sequence_cut(end, rng, config.p_cut)
    target = keep - 1
    positions = np.arange(max(0, target - config.max_len), target)
    ids = seq[positions].copy()
    if config.p_item_replace > 0:
        held_out = set(seq[end:].tolist())
        for j in np.flatnonzero(rng.random(len(ids)) < config.p_item_replace):
            sub = int(rng.integers(0, dataset.item_count))
            while sub in held_out:
                sub = int(rng.integers(0, dataset.item_count))
            ids[j] = sub
    negatives = sample_negatives(dataset, user, config.n_negatives_train, rng)
    return Example(user, positions, ids, target, int(seq[target]), negatives)


def _norms(model: SequentialRecommender) -> dict:
    out = {}
    for name, p in model.named_parameters():
        with np.errstate(all="ignore"):
            out[name] = {
                "param_norm": float(np.linalg.norm(p.values)),
                "grad_norm": float(np.linalg.norm(p.grad)) if p.grad is not None else None,
            }
    return out


def train_epoch(
    model: SequentialRecommender,
    dataset: InteractionDataset,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer: AdamW,
    drops: DropoutStream | None = None,
    inspect=None,
) -> dict:
    """One pass over all users in shuffled mini-batches; returns mean loss.

    ``inspect(examples)`` is called with each batch's examples before the
    forward pass (used by leakage checks).
    """
    params = model.parameters()
    model.train()
    order = rng.permutation(dataset.user_count)
    losses = []
    with T.precision(model.dtype):
        for start in range(0, len(order), config.batch_size):
            users = order[start : start + config.batch_size]
            examples = [training_example(dataset, int(u), config, rng) for u in users]
            if inspect is not None:
                inspect(examples)
            batch = make_batch(dataset, examples)
            try:
                loss = model.loss(model.score(batch, drops))
                T.backward(loss)
            except T.NumericalError as exc:
                raise NumericalAbort(str(exc), _norms(model)) from exc
            optimizer.step(params)
            losses.append(float(loss.values))
    model.eval()
    return {"loss": float(np.mean(losses)), "batches": len(losses)}


@dataclass
class FitResult:
    best_state: dict
    best_optimizer: dict
    best_epoch: int
    best_ndcg: float
    history: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def fit(
    model: SequentialRecommender,
    dataset: InteractionDataset,
    config: TrainConfig,
    eval_k: int = 10,
) -> FitResult:
    """Train with early stopping on validation NDCG@``eval_k``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    drops = DropoutStream(config.seed)
    optimizer = AdamW(learning_rate=config.lr, weight_decay=config.weight_decay)
    best = FitResult(model.state_dict(), copy.deepcopy(optimizer.state()), 0, -1.0)
    bad = 0
    for epoch in range(1, config.epochs + 1):
        stats = train_epoch(model, dataset, config, rng, optimizer, drops)
        best.losses.append(stats["loss"])
        logger.info("epoch %d loss %.6f", epoch, stats["loss"])
        if epoch % config.eval_every:
            continue
        report = evaluate(
            model,
            dataset,
            "valid",
            ks=(eval_k,),
            seed=config.seed,
            n_negatives=config.n_negatives_eval,
            max_len=config.max_len,
            n_groups=0,
        )
        ndcg = report.ndcg[eval_k]
        best.history.append(
            {"epoch": epoch, "loss": stats["loss"], f"valid_ndcg@{eval_k}": ndcg, f"valid_hr@{eval_k}": report.hr[eval_k]}
        )
        if ndcg > best.best_ndcg:
            best.best_ndcg, best.best_epoch = ndcg, epoch
            best.best_state = model.state_dict()
            best.best_optimizer = copy.deepcopy(optimizer.state())
            bad = 0
        else:
            bad += 1
            if bad > config.patience:
                break
    if not best.history:
        best.best_state = model.state_dict()
        best.best_optimizer = copy.deepcopy(optimizer.state())
        best.best_epoch = config.epochs
    return best


# ---------------------------------------------------------------------------
# checkpoint file
#
#   magic    8 bytes   b"PRXCKPT\0"
#   version  uint32 LE
#   hash     64 bytes  ascii sha256 hex of the model config
#   epoch    uint32 LE
#   hlen     uint64 LE length of the JSON header
#   header   JSON: {"entries": [{"name", "dtype", "shape", "offset", "nbytes"}], "meta": {...}}
#   blobs    raw C-order little-endian arrays at the listed offsets
# ---------------------------------------------------------------------------

MAGIC = b"PRXCKPT\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict
    config_hash: str
    epoch: int
    meta: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    for key in ("first_moment", "second_moment"):
        arrays += [(f"{key}/{k}", v) for k, v in ckpt.optimizer.get(key, {}).items()]
    entries, offset = [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    meta = dict(ckpt.meta, optimizer_step=int(ckpt.optimizer.get("step", 0)))
    header = json.dumps({"entries": entries, "meta": meta}, sort_keys=True).encode()
    if len(ckpt.config_hash) != 64:
        raise CheckpointError("config hash must be a sha256 hex digest")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(ckpt.config_hash.encode("ascii"))
        fh.write(struct.pack("<I", ckpt.epoch))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for (_, arr), entry in zip(arrays, entries):
            fh.write(np.ascontiguousarray(arr).astype(entry["dtype"], copy=False).tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config_hash = data[12:76].decode("ascii")
    (epoch,) = struct.unpack_from("<I", data, 76)
    (hlen,) = struct.unpack_from("<Q", data, 80)
    header = json.loads(data[88 : 88 + hlen])
    base = 88 + hlen
    params, moments = {}, {"first_moment": {}, "second_moment": {}}
    for e in header["entries"]:
        raw = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        kind, name = e["name"].split("/", 1)
        if kind == "param":
            params[name] = arr
        else:
            moments[kind][name] = arr
    meta = header.get("meta", {})
    optimizer = dict(moments, step=meta.get("optimizer_step", 0))
    return Checkpoint(params, optimizer, config_hash, epoch, meta)
