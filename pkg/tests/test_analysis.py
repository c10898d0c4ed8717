import numpy as np
import pytest

from proxyrec.analysis import (
    growth_experiment,
    item_vectors,
    memorization_probe,
    pca_project,
    pir_table,
    proxy_weight_table,
    removal_experiment,
    train_and_evaluate,
    write_vector_tsv,
)
from proxyrec.config import ModelConfig, TrainConfig
from proxyrec.data import DataError, SynthConfig, generate_synthetic
from proxyrec.model import build_for_dataset

DATA = SynthConfig(user_count=120, item_count=160, cluster_count=5, attribute_dim=6,
                   min_interactions=5, max_interactions=9)
MODEL = ModelConfig(d=8, n_proxy=4, k=10, blocks=1)
TRAIN = TrainConfig(epochs=1, batch_size=64, max_len=8, n_negatives_train=5, n_negatives_eval=100, lr=1e-2)


class TestMemorization:
    def test_identical_attributes(self):
        acc = memorization_probe(np.ones((10, 4)), epochs=100)
        assert acc <= 0.1 + 1e-9

    def test_one_hot_attributes(self):
        assert memorization_probe(np.eye(30), epochs=300) == 1.0

    def test_clustered_attributes_in_between(self):
        rng = np.random.default_rng(0)
        centroids = rng.normal(size=(20, 8))
        attrs = centroids[np.arange(100) % 20]
        acc = memorization_probe(attrs, epochs=300)
        assert 0.1 < acc < 1.0

    def test_needs_two_items(self):
        with pytest.raises(DataError):
            memorization_probe(np.ones((1, 3)))


class TestPCA:
    def test_points_on_a_line(self):
        t = np.linspace(-3, 3, 40)
        pts = np.outer(t, [1.0, 2.0, -0.5]) + [4.0, 0.0, 1.0]
        res = pca_project(pts)
        assert res.variances[1] < 1e-9 * res.variances[0]
        assert not res.degenerate

    def test_variance_ordering(self):
        x = np.random.default_rng(1).normal(size=(200, 5)) * [3, 1, 2, 0.5, 1]
        res = pca_project(x)
        var = res.coordinates.var(axis=0, ddof=1)
        assert var[0] >= var[1]
        np.testing.assert_allclose(var, res.variances, rtol=1e-6)

    def test_diagonal_gaussian_direction(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1000, 2)) * [2.0, 1.0]
        v = pca_project(x).components[0]
        angle = np.degrees(np.arccos(min(1.0, abs(v[0]) / np.linalg.norm(v))))
        assert angle < 5.0

    def test_matches_eigendecomposition(self):
        x = np.random.default_rng(3).normal(size=(50, 6)) @ np.random.default_rng(4).normal(size=(6, 6))
        res = pca_project(x)
        centred = x - x.mean(axis=0)
        vals, vecs = np.linalg.eigh(centred.T @ centred / 49)
        np.testing.assert_allclose(res.variances, vals[::-1][:2], rtol=1e-6)
        for i in range(2):
            assert abs(abs(res.components[i] @ vecs[:, -1 - i]) - 1) < 1e-6

    def test_zero_variance(self):
        res = pca_project(np.ones((5, 3)))
        assert res.degenerate
        np.testing.assert_array_equal(res.coordinates, np.zeros((5, 2)))


class TestExperiments:
    def test_removal_table(self):
        ds = generate_synthetic(DATA, 0)
        base = removal_experiment(ds, [0.0, 0.9], "full_table", MODEL, TRAIN)
        pir = removal_experiment(ds, [0.0, 0.9], "pir", MODEL, TRAIN)
        assert base[1]["param_count"] < base[0]["param_count"]
        assert pir[0]["param_count"] == pir[1]["param_count"]
        plain = build_for_dataset(ModelConfig(**{**MODEL.__dict__, "encoder": "full_table"}), ds, 0)
        assert base[0]["param_count"] == plain.num_parameters()
        for row in base + pir:
            assert set(row) >= {"ratio", "param_count", "ndcg@10", "diversity"}

    def test_removal_rejects_bad_ratio(self):
        ds = generate_synthetic(DATA, 0)
        with pytest.raises(DataError):
            removal_experiment(ds, [1.5], "pir", MODEL, TRAIN)

    def test_growth_param_counts(self):
        ds = generate_synthetic(DATA, 1)
        configs = {"full_table": ModelConfig(**{**MODEL.__dict__, "encoder": "full_table"}), "pir": MODEL}
        rows = growth_experiment(ds, configs, TRAIN, train=False)
        full = [r["param_count"] for r in rows if r["encoder"] == "full_table"]
        pir = [r["param_count"] for r in rows if r["encoder"] == "pir"]
        assert all(a < b for a, b in zip(full, full[1:]))
        assert len(set(pir)) == 1

    def test_full_partition_is_identity(self):
        ds = generate_synthetic(DATA, 2)
        rows = growth_experiment(ds, {"pir": MODEL}, TRAIN, partitions=(4,))
        _, report = train_and_evaluate(MODEL, TRAIN, ds)
        assert rows[0]["ndcg@10"] == report.ndcg[10]
        assert rows[0]["items"] == ds.item_count


class TestExports:
    def test_tables(self, tmp_path):
        ds = generate_synthetic(DATA, 3)
        model = build_for_dataset(MODEL, ds, 0)
        w = proxy_weight_table(model.encoder, ds)
        assert w.shape == (ds.item_count, 4)
        np.testing.assert_allclose(w.sum(axis=1), 1.0)
        assert pir_table(model.encoder, ds).shape == (ds.item_count, 8)
        vecs = item_vectors(model.encoder, ds)
        write_vector_tsv(tmp_path / "v.tsv", vecs[:3], header="demo")
        lines = (tmp_path / "v.tsv").read_text().splitlines()
        assert lines[0] == "# demo" and lines[1].startswith("0\t")
        np.testing.assert_allclose([float(x) for x in lines[2].split("\t")[1].split(",")], vecs[1], rtol=1e-9)
