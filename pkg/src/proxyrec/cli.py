"""Command line entry point: prepare / train / eval / analyze / export.

Every command takes the experiment config path; ``--seed`` and repeated
``--override section.key=value`` adjust it without editing the file.

Exit codes: 0 ok, 2 input error, 3 numeric abort, 4 provenance mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .config import ExperimentConfig, load_config
from .data import (
    DataError,
    InteractionDataset,
    dataset_stats,
    generate_synthetic,
    load_interactions,
    write_attributes,
    write_interactions,
)
from .evaluation import evaluate, frequency_groups
from .item_encoder import PIREncoder, rank_by_frequency
from .model import build_for_dataset
from .tensor import ConfigError
from .trainer import Checkpoint, CheckpointError, NumericalAbort, fit, load_checkpoint, save_checkpoint

logger = logging.getLogger("proxyrec")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PROVENANCE = 0, 2, 3, 4


class ProvenanceError(RuntimeError):
    pass


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.model_hash(), "seed": cfg.train.seed}


def _tsv_header(cfg: ExperimentConfig) -> str:
    p = _provenance(cfg)
    return f"# config_hash={p['config_hash']} seed={p['seed']}\n"


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepared_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.prepared) if cfg.prepared else Path(cfg.output) / "prepared"


def load_prepared(directory) -> InteractionDataset:
    directory = Path(directory)
    if not (directory / "interactions.tsv").exists():
        raise FileNotFoundError(f"no prepared dataset in {directory}; run `prepare` first")
    dataset = load_interactions(directory / "interactions.tsv", directory / "attributes.tsv")
    tokens = {}
    for name in ("users", "items"):
        rows = [
            line.rstrip("\n").split("\t", 1)[1]
            for line in (directory / f"{name}.tsv").read_text(encoding="utf-8").splitlines()
            if line and not line.startswith("#")
        ]
        tokens[name] = rows
    dataset.user_tokens = tokens["users"]
    dataset.item_tokens = tokens["items"]
    return dataset


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_prepare(cfg: ExperimentConfig) -> dict:
    out = _prepared_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.synth is not None:
        raw = generate_synthetic(cfg.synth, cfg.synth_seed)
        write_interactions(raw, out / "raw_interactions.tsv")
        write_attributes(raw, out / "raw_attributes.tsv")
        dataset = load_interactions(out / "raw_interactions.tsv", out / "raw_attributes.tsv")
    elif cfg.interactions:
        dataset = load_interactions(cfg.interactions, cfg.attributes, cfg.attribute_kind)
    else:
        raise ConfigError("config needs a [synth] section or [data] interactions path")

    header = _tsv_header(cfg)
    with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
        fh.write(header)
        for u, (seq, ts) in enumerate(zip(dataset.sequences, dataset.timestamps)):
            for i, t in zip(seq, ts):
                fh.write(f"{u}\t{i}\t{int(t)}\n")
    with open(out / "attributes.tsv", "w", encoding="utf-8") as fh:
        fh.write(header)
        for i, row in enumerate(dataset.attributes):
            fh.write(f"{i}\t{','.join(repr(float(v)) for v in row)}\n")
    for name, toks in (("users", dataset.user_tokens), ("items", dataset.item_tokens)):
        with open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
            fh.write(header)
            for i, tok in enumerate(toks):
                fh.write(f"{i}\t{tok}\n")
    with open(out / "split.tsv", "w", encoding="utf-8") as fh:
        fh.write(header)
        for u, seq in enumerate(dataset.sequences):
            fh.write(f"{u}\t{len(seq) - 2}\t{int(seq[-2])}\t{int(seq[-1])}\n")
    freqs = dataset.item_frequencies("train")
    with open(out / "frequency.tsv", "w", encoding="utf-8") as fh:
        fh.write(header)
        for i in rank_by_frequency(freqs):
            fh.write(f"{i}\t{int(freqs[i])}\n")
    stats = dict(dataset_stats(dataset), **_provenance(cfg))
    _write_json(out / "stats.json", stats)
    print(
        "users={users} items={items} interactions={interactions} density={density:.4%} "
        "unique_attributes={unique_attributes} duplicates={duplicates:.2f}".format(**stats)
    )
    return stats


def _load_model(cfg: ExperimentConfig, dataset: InteractionDataset, checkpoint: str | None):
    path = Path(checkpoint) if checkpoint else Path(cfg.output) / "checkpoint.bin"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found; run `train` first")
    ckpt = load_checkpoint(path)
    if ckpt.config_hash != cfg.model_hash():
        raise ProvenanceError(
            f"checkpoint was trained with config {ckpt.config_hash[:12]}, current config is {cfg.model_hash()[:12]}"
        )
    model = build_for_dataset(cfg.model, dataset, cfg.train.seed, cfg.train.dropout, cfg.train.tau)
    model.load_state_dict(ckpt.params)
    return model, ckpt


def cmd_train(cfg: ExperimentConfig) -> dict:
    dataset = load_prepared(_prepared_dir(cfg))
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    model = build_for_dataset(cfg.model, dataset, cfg.train.seed, cfg.train.dropout, cfg.train.tau)
    try:
        result = fit(model, dataset, cfg.train)
    except NumericalAbort as exc:
        diag = out / "diagnostics.json"
        _write_json(diag, {"error": str(exc), "norms": exc.diagnostics, **_provenance(cfg)})
        exc.diagnostics_path = str(diag)
        raise
    ckpt = Checkpoint(
        result.best_state,
        result.best_optimizer,
        cfg.model_hash(),
        result.best_epoch,
        meta={"seed": cfg.train.seed, "valid_ndcg@10": result.best_ndcg},
    )
    save_checkpoint(ckpt, out / "checkpoint.bin")
    history = {
        **_provenance(cfg),
        "full_config_hash": cfg.full_hash(),
        "best_epoch": result.best_epoch,
        "best_valid_ndcg@10": result.best_ndcg,
        "epoch_losses": result.losses,
        "evaluations": result.history,
        "param_count": model.num_parameters(),
        "param_inventory": model.parameter_inventory(),
    }
    _write_json(out / "history.json", history)
    print(f"best epoch {result.best_epoch} valid NDCG@10 {result.best_ndcg:.4f}")
    return history


def cmd_eval(cfg: ExperimentConfig, checkpoint: str | None = None, split: str = "test") -> dict:
    dataset = load_prepared(_prepared_dir(cfg))
    model, _ = _load_model(cfg, dataset, checkpoint)
    reports = []
    for seed in cfg.seeds:
        report = evaluate(
            model,
            dataset,
            split,
            ks=cfg.ks,
            seed=seed,
            n_negatives=cfg.train.n_negatives_eval,
            max_len=cfg.train.max_len,
        )
        report.config_hash = cfg.model_hash()
        report.runtime_seconds = 0.0
        reports.append(report.to_dict())
    payload = {**_provenance(cfg), "split": split, "reports": reports}
    if len(reports) > 1:
        payload["mean"] = {
            f"{m}@{k}": float(np.mean([r[m][f"@{k}"] for r in reports])) for m in ("hr", "ndcg") for k in cfg.ks
        }
    out = Path(cfg.output)
    _write_json(out / f"eval_{split}.json", payload)
    print(json.dumps(payload.get("mean") or {"hr": reports[0]["hr"], "ndcg": reports[0]["ndcg"]}, sort_keys=True))
    return payload


def _parse_list(text: str, cast=float):
    return [cast(v) for v in text.replace(",", " ").split()]


def cmd_analyze(cfg: ExperimentConfig, checkpoint: str | None = None) -> dict:
    dataset = load_prepared(_prepared_dir(cfg))
    opts = cfg.analyze
    groups = frequency_groups(dataset.item_frequencies("train"), int(opts.get("n_groups", 10)))
    payload: dict = {
        **_provenance(cfg),
        "frequency_groups": {
            "masses": groups.masses.tolist(),
            "item_counts": groups.item_counts.tolist(),
        },
        "memorization": analysis.memorization_probe(
            dataset.attributes,
            hidden_dim=int(opts.get("probe_hidden", 64)),
            epochs=int(opts.get("probe_epochs", 300)),
            seed=cfg.train.seed,
        ),
    }
    if checkpoint is not None or (Path(cfg.output) / "checkpoint.bin").exists():
        model, _ = _load_model(cfg, dataset, checkpoint)
        report = evaluate(model, dataset, "test", ks=cfg.ks, seed=cfg.train.seed,
                          n_negatives=cfg.train.n_negatives_eval, max_len=cfg.train.max_len)
        payload["per_group"] = report.per_group
    if "removal_ratios" in opts:
        ratios = _parse_list(opts["removal_ratios"])
        payload["removal"] = {
            kind: _seed_average(
                lambda tc, kind=kind: analysis.removal_experiment(dataset, ratios, kind, cfg.model, tc), cfg
            )
            for kind in ("full_table", "pir")
        }
    if opts.get("growth", "no").lower() in ("1", "yes", "true"):
        configs = {
            "full_table": dataclasses.replace(cfg.model, encoder="full_table", removal_ratio=0.0),
            "pir": dataclasses.replace(cfg.model, encoder="pir", removal_ratio=0.0),
        }
        payload["growth"] = _seed_average(lambda tc: analysis.growth_experiment(dataset, configs, tc), cfg)
    _write_json(Path(cfg.output) / "analysis.json", payload)
    print(json.dumps(payload["frequency_groups"], sort_keys=True))
    return payload


def _seed_average(run, cfg: ExperimentConfig) -> list[dict]:
    """Run once per configured seed and average the numeric columns."""
    runs = [run(dataclasses.replace(cfg.train, seed=s)) for s in cfg.seeds]
    merged = []
    for rows in zip(*runs):
        row = dict(rows[0])
        for key in ("ndcg@10", "hr@10", "diversity"):
            vals = [r[key] for r in rows if r.get(key) is not None]
            if vals:
                row[key] = float(np.mean(vals))
        row.pop("per_group", None)
        merged.append(row)
    return merged


def cmd_export(cfg: ExperimentConfig, checkpoint: str | None = None) -> dict:
    dataset = load_prepared(_prepared_dir(cfg))
    model, _ = _load_model(cfg, dataset, checkpoint)
    out = Path(cfg.output)
    header = _tsv_header(cfg).lstrip("# ").strip()
    written = {}
    vectors = analysis.item_vectors(model.encoder, dataset)
    pca = analysis.pca_project(vectors)
    analysis.write_vector_tsv(out / "pca.tsv", pca.coordinates, header)
    written["pca"] = str(out / "pca.tsv")
    if isinstance(model.encoder, PIREncoder):
        analysis.write_vector_tsv(out / "proxy_weights.tsv", analysis.proxy_weight_table(model.encoder, dataset), header)
        analysis.write_vector_tsv(out / "pir_vectors.tsv", analysis.pir_table(model.encoder, dataset), header)
        written["proxy_weights"] = str(out / "proxy_weights.tsv")
        written["pir_vectors"] = str(out / "pir_vectors.tsv")
    else:
        print(
            f"proxy exports refused: encoder '{cfg.model.encoder}' has no proxy bank "
            "(only the pir encoder produces proxy weights)",
            file=sys.stderr,
        )
    print(json.dumps(written, sort_keys=True))
    return written


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxyrec", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["prepare", "train", "eval", "analyze", "export"])
    parser.add_argument("config", help="experiment config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
    parser.add_argument("--checkpoint", default=None, help="checkpoint path (default: <output>/checkpoint.bin)")
    parser.add_argument("--split", default="test", choices=["valid", "test"])
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed)
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.split)
        elif args.command == "analyze":
            cmd_analyze(cfg, args.checkpoint)
        else:
            cmd_export(cfg, args.checkpoint)
    except ProvenanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROVENANCE
    except NumericalAbort as exc:
        where = getattr(exc, "diagnostics_path", None)
        print(f"error: numeric abort: {exc}" + (f" (diagnostics: {where})" if where else ""), file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError, ConfigError, CheckpointError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
