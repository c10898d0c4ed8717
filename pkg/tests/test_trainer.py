import dataclasses

import numpy as np
import pytest

from proxyrec.config import ModelConfig, TrainConfig
from proxyrec.data import SynthConfig, generate_synthetic, target_index
from proxyrec.evaluation import eval_examples
from proxyrec.model import build_for_dataset, make_batch
from proxyrec.nn import AdamW
from proxyrec.tensor import DropoutStream
from proxyrec.trainer import (
    Checkpoint,
    CheckpointError,
    NumericalAbort,
    fit,
    load_checkpoint,
    save_checkpoint,
    train_epoch,
)

TINY = SynthConfig(user_count=20, item_count=10, cluster_count=2, attribute_dim=4, min_interactions=4, max_interactions=5)
SMALL = SynthConfig(user_count=60, item_count=40, cluster_count=4, attribute_dim=6, min_interactions=5, max_interactions=9)
MODEL = ModelConfig(d=8, n_proxy=4, k=5, blocks=1, heads=2)
TRAIN = TrainConfig(epochs=3, batch_size=8, max_len=8, n_negatives_train=3, p_cut=0.5, dropout=0.1,
                    lr=1e-2, n_negatives_eval=5, patience=5)


def run_epochs(dataset, model_cfg, train_cfg, n, inspect=None):
    model = build_for_dataset(model_cfg, dataset, train_cfg.seed, train_cfg.dropout, train_cfg.tau)
    rng = np.random.default_rng(train_cfg.seed)
    opt = AdamW(learning_rate=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    drops = DropoutStream(train_cfg.seed)
    losses = [train_epoch(model, dataset, train_cfg, rng, opt, drops, inspect)["loss"] for _ in range(n)]
    return model, losses


class TestTrainEpoch:
    def test_zero_learning_rate_leaves_parameters(self):
        ds = generate_synthetic(TINY, 0)
        model = build_for_dataset(MODEL, ds, 0, 0.1)
        before = model.state_dict()
        cfg = dataclasses.replace(TRAIN, lr=0.0)
        train_epoch(model, ds, cfg, np.random.default_rng(0), AdamW(learning_rate=0.0), DropoutStream(0))
        for name, values in model.state_dict().items():
            np.testing.assert_array_equal(values, before[name])

    def test_loss_decreases_on_memorizable_data(self):
        cfg = dataclasses.replace(TRAIN, p_cut=0.0, dropout=0.0, batch_size=20)
        curves = []
        for seed in range(3):
            ds = generate_synthetic(TINY, seed)
            _, losses = run_epochs(ds, MODEL, dataclasses.replace(cfg, seed=seed), 5)
            curves.append(losses)
        mean = np.mean(curves, axis=0)
        assert np.all(np.diff(mean) < 0), mean

    def test_same_seed_same_loss(self):
        ds = generate_synthetic(TINY, 1)
        _, a = run_epochs(ds, MODEL, TRAIN, 2)
        _, b = run_epochs(ds, MODEL, TRAIN, 2)
        assert a == b

    @pytest.mark.parametrize("scorer", ["ip_bce", "ip_ntxent"])
    def test_inner_product_scorers_train(self, scorer):
        ds = generate_synthetic(TINY, 2)
        _, losses = run_epochs(ds, dataclasses.replace(MODEL, scorer=scorer), TRAIN, 2)
        assert np.all(np.isfinite(losses))

    def test_no_test_leakage(self):
        ds = generate_synthetic(SMALL, 3)
        seen = []

        def inspect(examples):
            for ex in examples:
                seq = ds.sequences[ex.user]
                held = {target_index(len(seq), "test"), target_index(len(seq), "valid")}
                assert ex.target_pos < len(seq) - 2
                assert not held & set(ex.positions.tolist())
                assert not set(seq[len(seq) - 2:].tolist()) & set(ex.input_ids.tolist())
                assert ex.target_id == seq[ex.target_pos]
                seen.append(ex.user)

        cfg = dataclasses.replace(TRAIN, p_item_replace=0.5, max_len=3)
        run_epochs(ds, MODEL, cfg, 3, inspect)
        assert sorted(seen) == sorted(list(range(ds.user_count)) * 3)

    def test_unseen_bias_rows_untouched(self):
        cfg_data = SynthConfig(user_count=6, item_count=200, cluster_count=4, attribute_dim=4,
                               min_interactions=5, max_interactions=6)
        ds = generate_synthetic(cfg_data, 4)
        model_cfg = dataclasses.replace(MODEL, k=200)
        cfg = dataclasses.replace(TRAIN, batch_size=6, weight_decay=0.0)
        model = build_for_dataset(model_cfg, ds, 0, 0.1)
        touched = set()

        def inspect(examples):
            for ex in examples:
                touched.update(ex.input_ids.tolist())
                touched.update(ex.negatives.tolist())
                touched.add(ex.target_id)

        bank = model.encoder.bank
        before = bank.freq_bias.values.copy()
        rng, opt = np.random.default_rng(0), AdamW(learning_rate=0.05)
        train_epoch(model, ds, cfg, rng, opt, DropoutStream(0), inspect)
        untouched = sorted(set(range(200)) - touched)
        rows = bank.bias_rows(untouched)
        assert len(untouched) > 100
        np.testing.assert_array_equal(bank.freq_bias.values[rows], before[rows])
        assert not np.array_equal(bank.freq_bias.values, before)

    def test_nan_aborts_with_diagnostics(self):
        ds = generate_synthetic(TINY, 5)
        model = build_for_dataset(MODEL, ds, 0)
        model.encoder.phi1.weight.values[...] = 1e308
        with pytest.raises(NumericalAbort) as info:
            train_epoch(model, ds, TRAIN, np.random.default_rng(0), AdamW(), DropoutStream(0))
        diag = info.value.diagnostics
        assert "encoder.phi1.weight" in diag
        assert diag["encoder.phi1.weight"]["param_norm"] > 1e300 or not np.isfinite(diag["encoder.phi1.weight"]["param_norm"])


class TestFit:
    def test_history_and_best(self):
        ds = generate_synthetic(SMALL, 6)
        model = build_for_dataset(MODEL, ds, 0, 0.1)
        result = fit(model, ds, dataclasses.replace(TRAIN, epochs=6, eval_every=2))
        assert len(result.history) == 3
        assert len(result.losses) == 6
        assert all(result.best_ndcg >= h["valid_ndcg@10"] for h in result.history)
        assert result.best_epoch in [h["epoch"] for h in result.history]

    def test_patience_zero_stops_at_first_non_improvement(self):
        for seed in range(3):
            ds = generate_synthetic(SMALL, 10 + seed)
            model = build_for_dataset(MODEL, ds, seed, 0.1)
            result = fit(model, ds, dataclasses.replace(TRAIN, epochs=15, patience=0, lr=3e-2, seed=seed))
            scores = [h["valid_ndcg@10"] for h in result.history]
            best = -1.0
            for i, s in enumerate(scores):
                if s <= best:
                    assert i == len(scores) - 1
                best = max(best, s)


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, tmp_path):
        ds = generate_synthetic(SMALL, 7)
        model, _ = run_epochs(ds, MODEL, TRAIN, 1)
        opt = AdamW(learning_rate=1e-2)
        train_epoch(model, ds, TRAIN, np.random.default_rng(1), opt, DropoutStream(1))
        path = tmp_path / "ck.bin"
        save_checkpoint(Checkpoint(model.state_dict(), opt.state(), "a" * 64, 4, {"seed": 0}), path)
        back = load_checkpoint(path)
        assert back.epoch == 4 and back.config_hash == "a" * 64 and back.meta["seed"] == 0
        assert back.optimizer["step"] == opt.step_count
        for name, m in opt.first_moment.items():
            np.testing.assert_array_equal(back.optimizer["first_moment"][name], m)

        fresh = build_for_dataset(MODEL, ds, 99)
        fresh.load_state_dict(back.params)
        batch = make_batch(ds, eval_examples(ds, "test", 0, 5, 8))
        model.eval()
        np.testing.assert_array_equal(fresh.score(batch).values, model.score(batch).values)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_shape_mismatch_on_load(self, tmp_path):
        ds = generate_synthetic(TINY, 8)
        model = build_for_dataset(MODEL, ds, 0)
        other = build_for_dataset(dataclasses.replace(MODEL, d=4), ds, 0)
        with pytest.raises((ValueError, KeyError)):
            other.load_state_dict(model.state_dict())
