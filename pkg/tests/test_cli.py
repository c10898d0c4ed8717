import json

import numpy as np
import pytest

from proxyrec.cli import main
from proxyrec.data import InteractionDataset, dataset_stats

BASE = """
[synth]
user_count = 60
item_count = 130
cluster_count = 4
attribute_dim = 6
min_interactions = 5
max_interactions = 9
seed = 3

[model]
encoder = {encoder}
d = 8
n_proxy = 4
k = 10
blocks = 1

[train]
epochs = {epochs}
batch_size = 32
max_len = 8
n_negatives_train = 5
lr = {lr}
eval_every = 1
patience = 2
n_negatives_eval = 50

[eval]
ks = 5, 10
seeds = 0, 1

[analyze]
probe_epochs = 20
n_groups = 10

[output]
dir = out
"""


def write_config(tmp_path, name="exp.ini", encoder="pir", epochs=2, lr=0.01):
    path = tmp_path / name
    path.write_text(BASE.format(encoder=encoder, epochs=epochs, lr=lr), encoding="utf-8")
    return str(path)


@pytest.fixture
def prepared(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["prepare", cfg]) == 0
    return tmp_path, cfg


class TestPrepare:
    def test_outputs_and_stats(self, prepared):
        root, _ = prepared
        out = root / "out" / "prepared"
        stats = json.loads((out / "stats.json").read_text())
        assert stats["density"] == stats["interactions"] / (stats["users"] * stats["items"])
        assert stats["duplicates"] == stats["items"] / stats["unique_attributes"]
        for name in ("interactions", "attributes", "users", "items", "split", "frequency"):
            first = (out / f"{name}.tsv").read_text().splitlines()[0]
            assert first.startswith("# config_hash=") and "seed=" in first
        assert len(stats["config_hash"]) == 64

    def test_density_at_catalog_scale(self):
        users, items, total = 45_184, 166_270, 358_003
        lengths = np.full(users, total // users)
        lengths[: total - lengths.sum()] += 1
        rng = np.random.default_rng(0)
        seqs = [rng.choice(items, size=n, replace=False) for n in lengths]
        ds = InteractionDataset(items, seqs, [np.arange(n) for n in lengths], np.zeros((items, 1)))
        stats = dataset_stats(ds)
        assert stats["interactions"] == total
        assert round(stats["density"] * 100, 4) == 0.0048

    def test_duplicates_from_shared_attributes(self, tmp_path):
        rows = [f"u{u}\ti{(u + k) % 6}\t{k}" for u in range(3) for k in range(4)]
        (tmp_path / "i.tsv").write_text("\n".join(rows) + "\n")
        (tmp_path / "a.tsv").write_text("".join(f"i{j}\t{j % 2},1\n" for j in range(6)))
        cfg = tmp_path / "c.ini"
        cfg.write_text("[data]\ninteractions = i.tsv\nattributes = a.tsv\n[output]\ndir = out\n")
        assert main(["prepare", str(cfg)]) == 0
        stats = json.loads((tmp_path / "out" / "prepared" / "stats.json").read_text())
        assert stats["unique_attributes"] == 2 and stats["duplicates"] == 3.0

    def test_empty_input(self, tmp_path, capsys):
        (tmp_path / "empty.tsv").write_text("")
        cfg = tmp_path / "c.ini"
        cfg.write_text("[data]\ninteractions = empty.tsv\n[output]\ndir = out\n")
        assert main(["prepare", str(cfg)]) == 2
        assert "error" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["prepare", str(tmp_path / "nope.ini")]) == 2

    def test_bad_override(self, tmp_path):
        assert main(["prepare", write_config(tmp_path), "--override", "nodot=3"]) == 2


class TestTrain:
    def test_missing_dataset(self, tmp_path):
        assert main(["train", write_config(tmp_path)]) == 2

    def test_history_is_reproducible(self, prepared):
        root, cfg = prepared
        assert main(["train", cfg]) == 0
        first = (root / "out" / "history.json").read_bytes()
        assert main(["train", cfg]) == 0
        assert (root / "out" / "history.json").read_bytes() == first
        history = json.loads(first)
        assert history["seed"] == 0 and len(history["config_hash"]) == 64
        assert len(history["epoch_losses"]) == len(history["evaluations"])

    def test_seed_flag_changes_run(self, prepared):
        root, cfg = prepared
        main(["train", cfg])
        a = json.loads((root / "out" / "history.json").read_text())
        main(["train", cfg, "--seed", "5"])
        b = json.loads((root / "out" / "history.json").read_text())
        assert b["seed"] == 5 and a["epoch_losses"] != b["epoch_losses"]

    def test_k_zero_has_no_item_parameters(self, prepared):
        root, cfg = prepared
        assert main(["train", cfg, "--override", "model.k=0"]) == 0
        inventory = json.loads((root / "out" / "history.json").read_text())["param_inventory"]
        assert not any("freq_bias" in name or "table" in name for name in inventory)
        assert main(["train", cfg]) == 0
        inventory = json.loads((root / "out" / "history.json").read_text())["param_inventory"]
        assert inventory["encoder.bank.freq_bias"] == 10 * 4

    def test_numeric_abort(self, prepared):
        root, cfg = prepared
        assert main(["train", cfg, "--override", "train.lr=1e200"]) == 3
        diag = json.loads((root / "out" / "diagnostics.json").read_text())
        assert "norms" in diag and "config_hash" in diag


class TestEvalAnalyzeExport:
    def test_eval_is_reproducible(self, prepared):
        root, cfg = prepared
        main(["train", cfg])
        assert main(["eval", cfg]) == 0
        first = (root / "out" / "eval_test.json").read_bytes()
        assert main(["eval", cfg]) == 0
        assert (root / "out" / "eval_test.json").read_bytes() == first
        payload = json.loads(first)
        assert [r["seed"] for r in payload["reports"]] == [0, 1]
        assert "ndcg@10" in payload["mean"]

    def test_valid_split(self, prepared):
        root, cfg = prepared
        main(["train", cfg])
        assert main(["eval", cfg, "--split", "valid"]) == 0
        assert (root / "out" / "eval_valid.json").exists()

    def test_hash_mismatch(self, prepared):
        _, cfg = prepared
        main(["train", cfg])
        assert main(["eval", cfg, "--override", "model.d=16"]) == 4

    def test_eval_without_checkpoint(self, prepared):
        _, cfg = prepared
        assert main(["eval", cfg]) == 2

    def test_export_pir(self, prepared):
        root, cfg = prepared
        main(["train", cfg])
        assert main(["export", cfg]) == 0
        lines = (root / "out" / "proxy_weights.tsv").read_text().splitlines()
        assert lines[0].startswith("# config_hash=")
        weights = np.array([[float(v) for v in ln.split("\t")[1].split(",")] for ln in lines[1:]])
        assert weights.shape[1] == 4
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-8)
        assert (root / "out" / "pca.tsv").exists() and (root / "out" / "pir_vectors.tsv").exists()

    def test_export_refused_for_full_table(self, tmp_path, capsys):
        cfg = write_config(tmp_path, encoder="full_table")
        main(["prepare", cfg])
        main(["train", cfg])
        capsys.readouterr()
        assert main(["export", cfg]) == 0
        assert "proxy exports refused" in capsys.readouterr().err
        assert not (tmp_path / "out" / "proxy_weights.tsv").exists()
        assert (tmp_path / "out" / "pca.tsv").exists()

    def test_analyze_groups(self, prepared):
        root, cfg = prepared
        main(["train", cfg])
        assert main(["analyze", cfg]) == 0
        payload = json.loads((root / "out" / "analysis.json").read_text())
        masses = np.array(payload["frequency_groups"]["masses"])
        freq = [int(ln.split("\t")[1]) for ln in (root / "out" / "prepared" / "frequency.tsv").read_text().splitlines()[1:]]
        assert masses.sum() == sum(freq)
        assert np.all(np.abs(masses - masses.sum() / 10) <= max(freq))
        assert 0.0 <= payload["memorization"] <= 1.0
        assert len(payload["per_group"]) == 10

    def test_analyze_removal_and_growth(self, prepared):
        root, cfg = prepared
        extra = ["--override", "analyze.removal_ratios=0, 0.5", "--override", "analyze.growth=yes",
                 "--override", "train.epochs=1", "--override", "eval.seeds=0"]
        assert main(["analyze", cfg, *extra]) == 0
        payload = json.loads((root / "out" / "analysis.json").read_text())
        base, pir = payload["removal"]["full_table"], payload["removal"]["pir"]
        assert base[1]["param_count"] < base[0]["param_count"]
        assert pir[0]["param_count"] == pir[1]["param_count"]
        growth = payload["growth"]
        assert [r["r"] for r in growth if r["encoder"] == "pir"] == [1, 2, 3, 4]
