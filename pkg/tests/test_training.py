import json

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.audit_logger import AuditLogger
from src.augmentation import AugmentConfig, build_batch, mask_forces
from src.autograd import Tensor
from src.errors import ConfigInvalid, DataError, NonFiniteGradient, ShapeMismatch
from src.model import ModelConfig, build, checkpoint_bytes
from src.training import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_gradients,
    train,
    train_step,
    write_loss_csv,
)

TINY = ModelConfig(down_blocks=2, layers_per_block=1, growth_rate=2, first_conv_filters=3,
                   up_conv_filters=4, dropout_rate=0.2)


def _param(values):
    return Tensor(np.asarray(values, dtype=np.float32).reshape(1, 1, 1, -1), requires_grad=True)


class TestClipGradients:
    def test_scales_to_max_norm(self):
        grads, norm = clip_gradients({"w": np.array([3.0, 4.0])}, 1.0)
        assert norm == pytest.approx(5.0)
        assert_allclose(grads["w"], [0.6, 0.8])

    def test_small_norm_unchanged(self):
        grads, norm = clip_gradients({"w": np.array([0.3, 0.4])}, 1.0)
        assert norm == pytest.approx(0.5)
        assert_array_equal(grads["w"], [0.3, 0.4])

    def test_global_norm_and_direction(self, rng):
        raw = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=5) * 10}
        grads, norm = clip_gradients(raw, 2.0)
        after = np.sqrt(sum(np.sum(g ** 2) for g in grads.values()))
        assert after == pytest.approx(min(norm, 2.0), abs=1e-6)
        ratio = grads["a"] / raw["a"]
        assert np.all(ratio > 0)
        assert_allclose(grads["b"] / raw["b"], ratio.flat[0])

    def test_non_finite(self):
        with pytest.raises(NonFiniteGradient):
            clip_gradients({"w": np.array([1.0, np.nan])}, 1.0)


class TestAdam:
    def cfg(self, **kw):
        values = dict(epochs=1, steps_per_epoch=1, batch_size=1, learning_rate=0.01, weight_decay=0.0,
                      clip_norm=1e9)
        values.update(kw)
        return TrainConfig(**values)

    def test_first_step_moves_by_learning_rate(self):
        params = {"w": _param([1.0, -2.0, 0.5])}
        grads = {"w": np.array([0.002, -3.0, 1.0]).reshape(1, 1, 1, 3)}
        adam_step(params, grads, AdamState.zeros(params), self.cfg())
        delta = np.abs(params["w"].data.ravel() - np.array([1.0, -2.0, 0.5]))
        assert np.all(delta >= 0.99 * 0.01) and np.all(delta <= 0.01 + 1e-6)

    def test_zero_gradient_no_change(self):
        params = {"w": _param([1.0, 2.0])}
        adam_step(params, {"w": np.zeros((1, 1, 1, 2))}, AdamState.zeros(params), self.cfg())
        assert_array_equal(params["w"].data.ravel(), [1.0, 2.0])

    def test_weight_decay_shrinks_toward_zero(self):
        start = np.array([1.5, -0.7, 0.2, -3.0])
        params = {"w": _param(start)}
        adam_step(params, {"w": np.zeros((1, 1, 1, 4))}, AdamState.zeros(params), self.cfg(weight_decay=1e-4))
        after = params["w"].data.ravel()
        assert np.all(np.abs(after) < np.abs(start))
        assert np.all(np.sign(after) == np.sign(start))

    def test_quadratic_bowl(self):
        params = {"theta": Tensor(np.ones((1, 1, 1, 1)), requires_grad=True, dtype=np.float64)}
        state = AdamState.zeros(params)
        cfg = self.cfg(learning_rate=0.05)
        for _ in range(500):
            adam_step(params, {"theta": 2 * params["theta"].data}, state, cfg)
        assert abs(params["theta"].data.item()) < 1e-2
        assert state.step == 500

    def test_shape_mismatch(self):
        params = {"w": _param([1.0, 2.0])}
        with pytest.raises(ShapeMismatch):
            adam_step(params, {"w": np.zeros(3)}, AdamState.zeros(params), self.cfg())


class TestTrainConfig:
    def test_paper_preset(self):
        cfg = TrainConfig.from_preset("paper")
        assert (cfg.epochs, cfg.steps_per_epoch, cfg.batch_size, cfg.crop) == (200, 50, 8, 256)
        assert (cfg.weight_decay, cfg.clip_norm) == (1e-4, 1.0)

    def test_cli_overrides_win(self, config_path):
        from src.utils import load_config
        cfg = TrainConfig.from_config(load_config(config_path), epochs=2, learning_rate=None)
        assert cfg.epochs == 2 and cfg.steps_per_epoch == 20 and cfg.learning_rate == 1e-3

    def test_invalid(self):
        with pytest.raises(ConfigInvalid):
            TrainConfig(epochs=0, steps_per_epoch=1, batch_size=1)
        with pytest.raises(ConfigInvalid):
            TrainConfig(epochs=1, steps_per_epoch=1, batch_size=1, clip_norm=0.0)


class TestTrainLoop:
    def test_requires_masked_frameset(self, small_frameset):
        cfg = TrainConfig(epochs=1, steps_per_epoch=1, batch_size=1, crop=32)
        with pytest.raises(DataError):
            train(build(TINY, 0), small_frameset, cfg, AugmentConfig(crop=32), progress=False)

    def test_first_step_log_term_is_zero(self, small_frameset):
        model = build(TINY, 0)
        inputs, targets = build_batch(mask_forces(small_frameset), AugmentConfig(crop=32), 0, 1, 2)
        _, _, log_term, _ = train_step(model, inputs, targets, seed=0, step=1)
        assert log_term == 0.0

    def test_history_checkpoint_and_audit(self, small_frameset, tmp_path):
        cfg = TrainConfig(epochs=2, steps_per_epoch=2, batch_size=2, crop=32, seed=3)
        audit_path = tmp_path / "audit.jsonl"
        with AuditLogger(str(audit_path)) as audit:
            result = train(build(TINY, 3), mask_forces(small_frameset), cfg, AugmentConfig(crop=32),
                           checkpoint_path=tmp_path / "m.tfmw", audit=audit, progress=False)
        assert list(result.history.columns) == ["step", "epoch", "loss", "loss_sq", "loss_log", "grad_norm"]
        assert result.history["step"].tolist() == [1, 2, 3, 4]
        assert result.history["epoch"].tolist() == [1, 1, 2, 2]
        assert result.checkpoint_path.exists()
        records = [json.loads(line) for line in audit_path.read_text().splitlines()]
        assert [r["step"] for r in records] == [1, 2, 3, 4]

        write_loss_csv(result.history, tmp_path / "loss.csv")
        df = pd.read_csv(tmp_path / "loss.csv", float_precision="round_trip")
        assert list(df.columns) == ["step", "epoch", "loss"]
        assert_allclose(df["loss"], result.history["loss"], rtol=0)

    def test_same_seed_identical_history_any_thread_count(self, small_frameset, monkeypatch):
        cfg = TrainConfig(epochs=1, steps_per_epoch=3, batch_size=2, crop=32, seed=9)
        fs = mask_forces(small_frameset)
        monkeypatch.setenv("TFM_THREADS", "1")
        a_model = build(TINY, 1)
        a = train(a_model, fs, cfg, AugmentConfig(crop=32), progress=False)
        monkeypatch.setenv("TFM_THREADS", "2")
        b_model = build(TINY, 1)
        b = train(b_model, fs, cfg, AugmentConfig(crop=32), progress=False)
        assert a.history["loss"].tolist() == b.history["loss"].tolist()
        assert checkpoint_bytes(a_model) == checkpoint_bytes(b_model)


@pytest.mark.slow
class TestOverfit:
    def test_overfit_one_sample(self):
        from src.synth_data import synthesize_frameset

        fs = mask_forces(synthesize_frameset(1, 64, 64, seed=21))
        cfg = TrainConfig(epochs=1, steps_per_epoch=200, batch_size=1, crop=64, seed=0,
                          learning_rate=1e-3, weight_decay=1e-4, clip_norm=1.0)
        aug = AugmentConfig(crop=64, flip_prob=0.0, max_rotation_deg=0.0, salt_image_prob=0.0)
        result = train(build(ModelConfig.from_preset("desk"), 0), fs, cfg, aug, progress=False)
        losses = result.history["loss"]
        assert losses.iloc[-1] <= 0.1 * losses.iloc[0]


@pytest.mark.slow
class TestLossTracksMetric:
    def test_validation_mae_follows_training_loss(self):
        from src.metrics import evaluate_mae
        from src.synth_data import synthesize_frameset

        fs = mask_forces(synthesize_frameset(4, 64, 64, seed=5))
        held_out = mask_forces(synthesize_frameset(2, 64, 64, seed=99))
        aug = AugmentConfig(crop=64)
        model = build(ModelConfig.from_preset("desk"), 0)

        epoch_loss, maes = [], [evaluate_mae(model, held_out, samples=4, seed=0).mean]
        for epoch in range(10):
            cfg = TrainConfig(epochs=1, steps_per_epoch=10, batch_size=2, crop=64, seed=epoch)
            result = train(model, fs, cfg, aug, progress=False)
            epoch_loss.append(result.history["loss"].mean())
            maes.append(evaluate_mae(model, held_out, samples=4, seed=0).mean)

        assert epoch_loss[-1] < epoch_loss[0]
        slope = np.polyfit(np.arange(len(maes)), maes, 1)[0]
        assert slope <= 0
