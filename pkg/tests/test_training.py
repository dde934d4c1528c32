import json

import numpy as np
import pytest

from pinchbeam import pipeline
from pinchbeam.autodiff import Tape
from pinchbeam.config import ModelConfig, default_config
from pinchbeam.errors import (DivergenceError, IncompatibleCheckpointError,
                              InvalidConfigError)
from pinchbeam.physics import check_feasibility
from pinchbeam.training import (TrainConfig, evaluate, load_checkpoint,
                                loss_on_tape, reference_se, save_checkpoint,
                                train, train_dataset)
from pinchbeam.training import test_dataset as held_out_dataset

MICRO = ModelConfig(pbf_layers=1, tbf_layers=1, hidden=6, message_dim=6)
TINY = TrainConfig(n_train=48, n_test=8, batch_size=16, epochs=2,
                   learning_rate=1e-3, seed=3, snr_db=10.0)


class TestDatasets:
    def test_streams_disjoint_and_deterministic(self):
        cfg = default_config(1, 1, 2)
        a = train_dataset(cfg, 16, 0)
        b = train_dataset(cfg, 16, 0)
        c = held_out_dataset(cfg, 16, 0)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_shapes_and_bounds(self):
        cfg = default_config(1, 1, 3)
        data = train_dataset(cfg, 10, 1)
        assert data.shape == (10, 3, 2)
        assert np.all((data >= 0) & (data <= cfg.D))


class TestLoss:
    def test_negative_mean_se(self):
        cfg = default_config(1, 1, 1)
        store = pipeline.init_parameters(cfg, MICRO, 0)
        phi = train_dataset(cfg, 4, 0)
        tape = Tape()
        loss = loss_on_tape(tape, phi, store, cfg, MICRO)
        out = pipeline.forward_on_tape(Tape(), phi, store, cfg, MICRO)
        assert float(loss.value) == pytest.approx(-float(out.se.value.mean()),
                                                  rel=1e-12)

    def test_batch_order_invariant(self):
        cfg = default_config(1, 1, 2)
        store = pipeline.init_parameters(cfg, MICRO, 1)
        phi = train_dataset(cfg, 6, 1)
        l1 = loss_on_tape(Tape(), phi, store, cfg, MICRO)
        l2 = loss_on_tape(Tape(), phi[::-1].copy(), store, cfg, MICRO)
        assert float(l1.value) == pytest.approx(float(l2.value), abs=1e-12)

    def test_tape_se_matches_reference_physics(self):
        # The differentiable pipeline and the plain-numpy model are
        # independent realizations of the same math.
        cfg = default_config(2, 3, 2)
        store = pipeline.init_parameters(cfg, MICRO, 2)
        data = held_out_dataset(cfg, 5, 2)
        for i in range(5):
            result = pipeline.policy_forward(data[i], store, cfg, MICRO)
            assert reference_se(data[i], result, cfg) == pytest.approx(
                result.se, rel=1e-10)


class TestTrain:
    def test_deterministic_runs(self):
        cfg = default_config(1, 1, 1)
        s1, r1 = train(TINY, cfg, MICRO)
        s2, r2 = train(TINY, cfg, MICRO)
        assert r1.epoch_losses == r2.epoch_losses
        assert r1.test_mean_se == r2.test_mean_se
        for name in s1.names():
            np.testing.assert_array_equal(s1.values[name], s2.values[name])

    def test_zero_learning_rate_freezes(self):
        cfg = default_config(1, 1, 1)
        tc = TrainConfig(n_train=32, n_test=4, batch_size=16, epochs=3,
                         learning_rate=0.0, seed=0, snr_db=10.0)
        store, report = train(tc, cfg, MICRO)
        init = pipeline.init_parameters(cfg.with_snr_db(10.0), MICRO,
                                        np.random.SeedSequence((0, 2)))
        for name in store.names():
            np.testing.assert_array_equal(store.values[name], init.values[name])
        # Shuffling regroups batches per epoch, so the aggregate may move by
        # float reassociation only.
        assert max(report.epoch_losses) - min(report.epoch_losses) <= 1e-12

    def test_monotone_sanity(self):
        # Mean test SE after a short run is not below the value at init.
        cfg = default_config(2, 1, 2)
        tc = TrainConfig(n_train=256, n_test=32, batch_size=32, epochs=4,
                         learning_rate=1e-3, seed=5, snr_db=10.0)
        run_cfg = cfg.with_snr_db(10.0)
        init_store = pipeline.init_parameters(run_cfg, MICRO,
                                              np.random.SeedSequence((5, 2)))
        before = evaluate(init_store, run_cfg, MICRO, 32, 5).mean_se
        _, report = train(tc, cfg, MICRO)
        assert report.test_mean_se >= before - 1e-12

    def test_divergence_guard(self, monkeypatch):
        cfg = default_config(1, 1, 1)

        def bad_loss(tape, phi, store, run_cfg, model):
            return tape.constant(float("nan"))

        import pinchbeam.training as training_mod
        monkeypatch.setattr(training_mod, "loss_on_tape", bad_loss)
        with pytest.raises(DivergenceError) as err:
            training_mod.train(TINY, cfg, MICRO)
        assert err.value.epoch == 0
        assert err.value.batch_index == 0

    def test_train_config_validation(self):
        with pytest.raises(InvalidConfigError):
            TrainConfig(n_train=0)
        with pytest.raises(InvalidConfigError):
            TrainConfig(learning_rate=-1.0)


class TestEvaluate:
    def test_deterministic(self):
        cfg = default_config(1, 1, 2)
        store = pipeline.init_parameters(cfg, MICRO, 0)
        a = evaluate(store, cfg, MICRO, 6, seed=9)
        b = evaluate(store, cfg, MICRO, 6, seed=9)
        np.testing.assert_array_equal(a.per_sample_se, b.per_sample_se)

    def test_mean_is_arithmetic_mean(self):
        cfg = default_config(1, 1, 2)
        store = pipeline.init_parameters(cfg, MICRO, 1)
        res = evaluate(store, cfg, MICRO, 6, seed=2)
        assert res.mean_se == pytest.approx(res.per_sample_se.mean(), rel=1e-15)
        assert res.mean_time_s > 0.0

    def test_outputs_feasible(self):
        cfg = default_config(2, 2, 2)
        store = pipeline.init_parameters(cfg, MICRO, 2)
        data = held_out_dataset(cfg, 5, 3)
        for i in range(5):
            result = pipeline.policy_forward(data[i], store, cfg, MICRO)
            assert check_feasibility(result.layout, result.w, cfg) == []


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        cfg = default_config(1, 1, 1)
        store = pipeline.init_parameters(cfg, MICRO, 7)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, store, cfg, 7, MICRO)
        ckpt = load_checkpoint(path)
        assert ckpt.cfg == cfg
        assert ckpt.seed == 7
        assert ckpt.model == MICRO
        for name in store.names():
            np.testing.assert_array_equal(ckpt.store.values[name],
                                          store.values[name])
        assert "tbf.input_scale" not in ckpt.store.trainable_names()

    def test_missing_file(self, tmp_path):
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(tmp_path / "nope.json")

    def test_corrupt_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_wrong_format_version(self, tmp_path):
        cfg = default_config(1, 1, 1)
        store = pipeline.init_parameters(cfg, MICRO, 0)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, store, cfg, 0, MICRO)
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_entry_names_validated(self, tmp_path):
        cfg = default_config(1, 1, 1)
        store = pipeline.init_parameters(cfg, MICRO, 0)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, store, cfg, 0, MICRO)
        doc = json.loads(path.read_text())
        doc["entries"] = doc["entries"][1:]  # drop one parameter
        path.write_text(json.dumps(doc))
        with pytest.raises(IncompatibleCheckpointError):
            load_checkpoint(path)

    def test_checkpoint_names_follow_scheme(self):
        cfg = default_config(2, 2, 2)
        store = pipeline.init_parameters(cfg, ModelConfig(), 0)
        names = store.names()
        for layer in (1, 2, 3):
            for sub in ("ff", "qf1", "qf2", "fq", "qq1", "qq2"):
                assert f"pbf.layer{layer}.{sub}.W0" in names
                assert f"pbf.layer{layer}.{sub}.b1" in names
            for sub in ("ff", "qf", "fq", "qq"):
                assert f"tbf.layer{layer}.{sub}.W0" in names
        for head in ("gap", "x1"):
            assert f"pbf.head.{head}.W0" in names
        for head in ("p", "lambda"):
            assert f"tbf.head.{head}.W0" in names
        assert "tbf.input_scale" in names
