import dataclasses

import numpy as np
import pytest

from srem.dataset import make_splits
from srem.diagnostics import EpochMonitor, metrics_csv
from srem.losses import Components, SremHyper
from srem.trainer import (AdamState, DivergenceError, TrainConfig, adam_step, clip_global_norm,
                          run_training)

DESK_HYPER = SremHyper(tau=-8.0, m_clean=-10.0, m_noisy=-7.0, lambda1=0.03)


@pytest.fixture(scope="module")
def small():
    return make_splits(256, 64, 64, noise_ratio=0.4, image_dim=12, text_dim=10, clusters=8)


def small_config(**kw):
    base = dict(epochs_total=4, warmup_epochs=2, lr=3e-3, embed_dim=8, batch_size=64,
                hyper=DESK_HYPER)
    base.update(kw)
    return TrainConfig(**base)


def train(splits, cfg):
    monitor = EpochMonitor(splits.train.match_flag, keep_batches=True)
    val = (splits.val.image_feats, splits.val.text_feats)
    return run_training(cfg, splits.train.features, val, monitor), monitor


def test_adam_examples():
    p = {"a": np.array([[1.0, -2.0]]), "b": np.array([[3.0, 3.0]])}
    state = AdamState()
    out = adam_step(p, {"a": np.array([[0.5, -4.0]]), "b": np.array([[0.5, 0.5]])}, state, 1e-3, eps=0.0)
    assert np.allclose(out["a"], p["a"] - 1e-3 * np.sign([[0.5, -4.0]]), atol=1e-15)
    assert np.all(out["b"][0, 0] == out["b"][0, 1])
    m_before = state.m["a"].copy()
    again = adam_step(out, {"a": np.zeros((1, 2)), "b": np.zeros((1, 2))}, state, 1e-3)
    assert np.allclose(state.m["a"], 0.9 * m_before)
    assert state.step == 2
    fresh = AdamState()
    still = adam_step(p, {"a": np.zeros((1, 2)), "b": np.zeros((1, 2))}, fresh, 1e-3)
    assert np.array_equal(still["a"], p["a"])
    assert not np.array_equal(again["a"], out["a"])


def test_adam_rejects_bad_gradients():
    p = {"w": np.ones((2, 2))}
    with pytest.raises(DivergenceError, match="w"):
        adam_step(p, {"w": np.array([[np.nan, 0], [0, 0]])}, AdamState(), 1e-3)
    with pytest.raises(ValueError, match="shape"):
        adam_step(p, {"w": np.ones((1, 2))}, AdamState(), 1e-3)


def test_clip_global_norm():
    g = {"a": np.array([[3.0]]), "b": np.array([[4.0]])}
    clipped = clip_global_norm(g, 2.0)
    assert np.sqrt(sum((v ** 2).sum() for v in clipped.values())) == pytest.approx(2.0)
    assert clip_global_norm(g, 10.0) is g
    assert clip_global_norm(g, None) is g


def test_schedule_and_phases():
    cfg = TrainConfig()
    assert cfg.lr_at(25) == 2e-4 and cfg.lr_at(26) == pytest.approx(2e-5)
    assert [cfg.phase(e) for e in (1, 5, 6)] == ["warmup", "warmup", "train"]
    assert TrainConfig(warmup_epochs=5, epochs_total=5).problems()
    assert TrainConfig(lr=0.0).problems()


def test_phase_boundary_runs_one_full_epoch(small):
    result, _ = train(small, small_config(epochs_total=3, warmup_epochs=2))
    assert [r.phase for r in result.records] == ["warmup", "warmup", "train"]


def test_warmup_records_have_no_ranking_or_energy_terms(small):
    result, monitor = train(small, small_config())
    for rec in result.records[:2]:
        assert rec.losses["l_w_i2t"] == rec.losses["l_w_t2i"] == 0.0
        assert rec.losses["l_u_I"] == rec.losses["l_u_T"] == 0.0
        assert rec.noisy_grad_ratio is None
    for entry in monitor.batch_log:
        if entry["epoch"] <= 2:
            assert entry["l_w_i2t"] == entry["l_u_I"] == 0.0
    assert result.records[-1].losses["l_w_i2t"] > 0


def test_best_checkpoint_is_best_validation_epoch(small):
    result, _ = train(small, small_config(epochs_total=5))
    r_sums = [r.r_sum for r in result.records]
    assert result.best_val_r_sum == max(r_sums)
    assert result.best_epoch == 1 + int(np.argmax(r_sums))


def test_identical_configs_give_identical_records(small):
    a, _ = train(small, small_config())
    b, _ = train(small, small_config())
    assert metrics_csv(a.records) == metrics_csv(b.records)
    c, _ = train(small, small_config(seed=1))
    assert metrics_csv(a.records) != metrics_csv(c.records)


def test_warmup_lowers_the_complementary_loss():
    splits = make_splits()
    cfg = TrainConfig(epochs_total=6, warmup_epochs=5)
    result = run_training(cfg, splits.train.features)
    first, last = result.records[0].losses, result.records[4].losses
    assert last["l_c_i2t"] + last["l_c_t2i"] < first["l_c_i2t"] + first["l_c_t2i"]


def test_vanilla_baseline_trains_on_every_pair(small):
    result, _ = train(small, small_config(components=Components.baseline()))
    for rec in result.records:
        assert rec.losses["l_c_i2t"] == rec.losses["l_u_I"] == 0.0
    assert result.records[-1].filtration.recall == 1.0


def test_divergence_names_epoch_and_batch(small):
    img = small.train.image_feats.copy()
    img[5] = np.nan
    bad = dataclasses.replace(small.train, image_feats=img)
    with pytest.raises(DivergenceError) as err:
        run_training(small_config(), bad.features)
    assert err.value.epoch == 1 and err.value.batch is not None
    assert "epoch 1, batch" in str(err.value)


def test_invalid_config_is_reported():
    splits = make_splits(64, 16, 16, image_dim=4, text_dim=4, clusters=4)
    with pytest.raises(ValueError, match="warmup_epochs"):
        run_training(TrainConfig(epochs_total=2, warmup_epochs=3), splits.train.features)
