from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from respcvae.cvae import ModelConfig, ReconConfig
from respcvae.data.corridor import CorridorConfig, gen_corridor_dataset
from respcvae.errors import InvalidInputError
from respcvae.safety_filter import FilterConfig
from respcvae.training import (
    AdamState,
    TrainConfig,
    adam_step,
    beta_schedule,
    clip_global_norm,
    load_training_checkpoint,
    save_training_checkpoint,
    temperature_schedule,
    train,
    train_deterministic,
)

FCFG = FilterConfig(activation="softmax")
MODEL = ModelConfig(hidden=(8, 8))


@pytest.fixture(scope="module")
def data():
    return gen_corridor_dataset(CorridorConfig(), 96, FilterConfig(), np.random.default_rng(0))


def reference_adam(x, grads, lr, b1, b2, eps):
    """Plain per-coordinate loop, one gradient per step."""
    x = list(x)
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    for t, g in enumerate(grads, start=1):
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            x[i] -= lr * (m[i] / (1 - b1**t)) / ((v[i] / (1 - b2**t)) ** 0.5 + eps)
    return np.array(x)


class TestAdam:
    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig(learning_rate=0.01)
        x0 = rng.normal(size=4)
        grads = rng.normal(size=(6, 4))
        x, state = x0.copy(), AdamState.zeros(4)
        for g in grads:
            x, state, _ = adam_step(x, g, state, cfg)
        np.testing.assert_allclose(x, reference_adam(x0, grads, 0.01, cfg.b1, cfg.b2, cfg.eps), rtol=1e-13)
        assert state.step == 6

    def test_first_step_is_signed_learning_rate(self):
        x, _, _ = adam_step(np.zeros(3), np.array([2.0, -0.5, 7.0]), AdamState.zeros(3), TrainConfig(learning_rate=0.1))
        np.testing.assert_allclose(x, [-0.1, 0.1, -0.1], rtol=1e-6)

    def test_non_finite_gradient_skipped(self):
        state = AdamState.zeros(2)
        x, new, skipped = adam_step(np.ones(2), np.array([np.nan, 1.0]), state, TrainConfig())
        assert skipped and new is state
        np.testing.assert_array_equal(x, [1.0, 1.0])

    def test_zero_learning_rate_keeps_params(self):
        x, _, _ = adam_step(np.ones(2), np.ones(2), AdamState.zeros(2), TrainConfig(learning_rate=0.0))
        np.testing.assert_array_equal(x, [1.0, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            adam_step(np.ones(2), np.ones(3), AdamState.zeros(2), TrainConfig())


class TestSchedules:
    def test_beta_ramp(self):
        cfg = TrainConfig(epochs=10, beta_start_epoch=2, beta_end_epoch=6, max_beta=0.5)
        got = [beta_schedule(e, cfg) for e in range(10)]
        np.testing.assert_allclose(got, [0, 0, 0, 0.125, 0.25, 0.375, 0.5, 0.5, 0.5, 0.5])

    def test_default_ramp_end(self):
        assert TrainConfig(epochs=40).beta_end == pytest.approx(12.0)

    def test_temperature_endpoints(self):
        cfg = TrainConfig(epochs=5, temperature_start=2.0, temperature_end=0.5)
        assert temperature_schedule(0, cfg) == 2.0
        assert temperature_schedule(4, cfg) == pytest.approx(0.5)
        assert temperature_schedule(2, cfg) == pytest.approx(1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 100), st.floats(0, 100))
    def test_beta_monotone(self, a, b):
        cfg = TrainConfig(epochs=20)
        lo, hi = sorted((a, b))
        assert 0.0 <= beta_schedule(lo, cfg) <= beta_schedule(hi, cfg) <= cfg.max_beta

    def test_clip_global_norm(self):
        g, n = clip_global_norm(np.array([3.0, 4.0]), 1.0)
        np.testing.assert_allclose(g, [0.6, 0.8])
        assert n == 5.0
        g, _ = clip_global_norm(np.array([0.3, 0.4]), 1.0)
        np.testing.assert_array_equal(g, [0.3, 0.4])

    def test_config_validation(self):
        with pytest.raises(InvalidInputError):
            TrainConfig(epochs=0)
        with pytest.raises(InvalidInputError):
            TrainConfig(b1=1.0)


class TestTrainLoop:
    def test_loss_decreases(self, data):
        res = train(data, MODEL, TrainConfig(epochs=6, learning_rate=5e-3), FCFG, ReconConfig())
        losses = [h["loss"] for h in res.history]
        assert losses[-1] < losses[0]
        assert all(np.isfinite(losses)) and len(losses) == 6

    def test_same_seed_same_params(self, data):
        cfg = TrainConfig(epochs=2)
        a = train(data, MODEL, cfg, FCFG, ReconConfig())
        b = train(data, MODEL, cfg, FCFG, ReconConfig())
        np.testing.assert_array_equal(a.store.flat, b.store.flat)

    def test_resume_is_contiguous(self, data, tmp_path):
        # schedules must not depend on the epoch budget for a stop/resume to match
        cfg = TrainConfig(epochs=4, checkpoint_every=2, beta_end_epoch=3.0)
        full = train(data, MODEL, cfg, FCFG, ReconConfig())
        half = train(data, MODEL, replace(cfg, epochs=2), FCFG, ReconConfig(), checkpoint_path=tmp_path / "c.zip")
        resumed = train(data, MODEL, cfg, FCFG, ReconConfig(), resume=load_training_checkpoint(tmp_path / "c.zip"))
        assert len(half.history) == 2
        np.testing.assert_array_equal(resumed.store.flat, full.store.flat)
        assert [h["loss"] for h in resumed.history] == [h["loss"] for h in full.history]

    def test_checkpoint_round_trip(self, data, tmp_path):
        res = train(data, MODEL, TrainConfig(epochs=1), FCFG, ReconConfig())
        save_training_checkpoint(tmp_path / "r.zip", res, TrainConfig(epochs=1), ReconConfig())
        back = load_training_checkpoint(tmp_path / "r.zip")
        np.testing.assert_array_equal(back.store.flat, res.store.flat)
        np.testing.assert_array_equal(back.opt.m, res.opt.m)
        assert back.opt.step == res.opt.step
        assert back.model == res.model
        assert back.history == res.history

    def test_learned_sigma_parameter(self, data):
        res = train(data, MODEL, TrainConfig(epochs=1), FCFG, ReconConfig(learn_sigma=True))
        assert "recon.log_sigma" in res.store

    def test_deterministic_network_fits(self, data):
        res = train_deterministic(data, MODEL, TrainConfig(epochs=5, learning_rate=5e-3), FCFG)
        assert res.kind == "deterministic"
        assert res.history[-1]["loss"] < res.history[0]["loss"]
        assert res.history[-1]["kl"] == 0.0

    def test_empty_dataset(self, data):
        with pytest.raises(InvalidInputError):
            train(data.take(np.arange(0)), MODEL, TrainConfig(epochs=1), FCFG, ReconConfig())
