import json
from dataclasses import replace

import numpy as np
import pytest

from tsrobust import attnmodel as am
from tsrobust import pipeline as pl
from tsrobust import synthetic
from tsrobust.series_io import TimeSeries


def small_cfg(**kw):
    base = dict(lookback=16, horizon=4, stride=4, epochs=2, pretrain_epochs=1, batch_size=16,
                d_model=8, seed=0)
    base.update(kw)
    return pl.RunConfig(**base)


@pytest.fixture(scope="module")
def series():
    return synthetic.make_fixture(length=400, channels=2, seed=1)


def test_split_is_chronological(series):
    cfg = small_cfg()
    data = pl.prepare(series, cfg)
    (tr, va, te) = pl.split_bounds(series.length)
    assert tr[1] == 280 and va == (280, 320) and te == (320, 400)
    train_max = data.train.offset + max(data.train.origins) + cfg.lookback + cfg.horizon - 1
    assert train_max < data.val.offset + min(data.val.origins)
    assert data.val.offset + max(data.val.origins) + cfg.lookback + cfg.horizon - 1 \
        < data.test.offset + min(data.test.origins)


def test_statistics_fitted_on_train_only(series):
    cfg = small_cfg()
    poisoned = series.values.copy()
    poisoned[:, 300:] = 1e6
    a = pl.prepare(series, cfg)
    b = pl.prepare(TimeSeries.from_array(poisoned), cfg)
    np.testing.assert_array_equal(a.norm.mean, b.norm.mean)
    np.testing.assert_array_equal(a.norm.std, b.norm.std)
    assert a.clean_stats == b.clean_stats


def test_inputs_are_finite_and_targets_complete(series):
    data = pl.prepare(series, small_cfg())
    for split in (data.train, data.val, data.test):
        assert np.all(np.isfinite(split.z_orig)) and np.all(np.isfinite(split.z_aug))
        assert np.all(np.isfinite(split.target))


def test_without_positive_channels_are_identical(series):
    cfg = small_cfg(use_pos_generation=False)
    data = pl.prepare(series, cfg)
    np.testing.assert_array_equal(data.train.z_aug, data.train.z_orig)
    params = am.init_params(cfg.model_config(), 0)
    pred, _ = am.forward(params, data.test.z_orig, data.test.z_aug)
    tied = dict(params, w_in=np.stack([params["w_in"].sum(axis=0), np.zeros(cfg.d_model)]))
    pred_tied, _ = am.forward(tied, data.test.z_orig, np.zeros_like(data.test.z_orig))
    np.testing.assert_allclose(pred, pred_tied, rtol=1e-12, atol=1e-12)


def test_positive_channel_removes_spikes():
    t = np.arange(1000)
    clean = np.sin(2 * np.pi * t / 24)
    spiked = clean.copy()
    spiked[[40, 130, 250, 610]] += 30.0
    spiked[90:95] = np.nan
    cfg = small_cfg(lookback=48, horizon=8, clean=pl.CleanConfig(smooth_window=1))
    data = pl.prepare(TimeSeries.from_array([spiked]), cfg)
    z_aug = data.train.z_aug
    assert np.all(np.isfinite(z_aug))
    bound = np.abs(data.norm.apply(clean[None, :])).max() + 0.1
    assert np.abs(z_aug).max() < bound
    assert np.abs(data.train.z_orig).max() > 10  # the raw channel still carries the spikes


def test_pretrain_zero_epochs_returns_init(series):
    cfg = small_cfg(pretrain_epochs=0)
    data = pl.prepare(series, cfg)
    params = am.init_params(cfg.model_config(), 0)
    out, losses = pl.stage_pretrain(params, data, cfg)
    assert losses == []
    assert all(np.array_equal(out[k], params[k]) for k in params)


@pytest.mark.parametrize("use_ecos", [False, True])
def test_pretrain_loss_trend(use_ecos):
    series = synthetic.make_fixture(length=800, channels=2, seed=1)
    cfg = small_cfg(lookback=32, pretrain_epochs=30, use_ecos=use_ecos)
    data = pl.prepare(series, cfg)
    _, losses = pl.stage_pretrain(am.init_params(cfg.model_config(), 0), data, cfg)
    medians = [np.median(losses[i:i + 5]) for i in range(0, 30, 5)]
    assert all(b <= a for a, b in zip(medians, medians[1:])), medians


def test_run_is_deterministic(series):
    cfg = small_cfg()
    a = pl.run(cfg, series=series)
    b = pl.run(cfg, series=series)
    assert a.metrics == b.metrics
    assert a.train_losses == b.train_losses and a.pretrain_losses == b.pretrain_losses


def test_run_writes_artifacts(series, tmp_path):
    report = pl.run(small_cfg(), tmp_path, series=series)
    for name in ("report.json", "checkpoint", "attention.csv", "steps.jsonl", "losses.png"):
        assert (tmp_path / name).exists(), name
    doc = json.loads((tmp_path / "report.json").read_text())
    assert set(doc["metrics"]) >= {"mse", "mae", "smape", "mase"}
    attention = np.loadtxt(tmp_path / "attention.csv", delimiter=",")
    assert attention.shape == (16, 16)
    np.testing.assert_allclose(attention.sum(axis=1), 1.0, atol=1e-9)
    lines = (tmp_path / "steps.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert {"step", "loss_clean", "loss_perturbed", "loss_adv", "grad_norm", "e_theta_norm",
            "skipped_perturbation"} <= set(first)
    assert report.metrics == doc["metrics"]
    params = am.load_checkpoint(tmp_path / "checkpoint")
    metrics, _ = pl.evaluate_checkpoint(small_cfg(), tmp_path / "checkpoint", series=series)
    assert metrics == report.metrics
    assert params["w_head"].shape == (16, 4)


def test_evaluate_batch_size_invariant(series):
    cfg = small_cfg()
    data = pl.prepare(series, cfg)
    params = am.init_params(cfg.model_config(), 3)
    m1, a1 = pl.evaluate(params, data, cfg, batch_size=1)
    m2, a2 = pl.evaluate(params, data, cfg, batch_size=7)
    for k in ("mse", "mae", "smape", "mase"):
        assert m1[k] == pytest.approx(m2[k], rel=1e-12)
    np.testing.assert_allclose(a1, a2, rtol=1e-12)


def test_overfit_single_window():
    g = np.random.default_rng(0)
    L, H = 8, 4
    params = am.init_params(am.ModelConfig(L, H, 8, 1), 0)
    z = g.normal(size=(1, 1, L))
    y = g.normal(size=(1, 1, H))
    split = pl.SplitData(z, z.copy(), y, y.copy(), [0], 0)
    state = pl.ecos.EcosState()
    for _ in range(3000):
        _, grads = am.loss_and_grads(params, z, z, y)
        params = pl.ecos.adam_step(params, grads, state.base_state, 1e-2)
    data = pl.PreparedData(norm=pl.NormStats(np.zeros(1), np.ones(1)), clean_stats=[],
                           train=split, val=split, test=split, channel_names=["a"])
    metrics, attention = pl.evaluate(params, data, small_cfg(lookback=L, horizon=H))
    assert metrics["mse"] < 1e-6
    np.testing.assert_allclose(attention.sum(axis=1), 1.0, atol=1e-9)


def test_ablation_grid_expressible_by_toggles():
    assert list(pl.ABLATIONS) == ["full", "w/o Neg", "w/o Pos", "w/o ECOS", "w/o Pos+ECOS",
                                  "w/o Neg+ECOS"]
    assert len(set(pl.ABLATIONS.values())) == 6
    off = small_cfg().with_toggles(False, False, False)
    assert not (off.use_neg_pretrain or off.use_pos_generation or off.use_ecos)


def test_all_toggles_off_is_plain_adam(series):
    cfg = small_cfg(epochs=1).with_toggles(False, False, False)
    data = pl.prepare(series, cfg)
    params = am.init_params(cfg.model_config(), cfg.seed)
    trained, _, _ = pl.stage_train(params, data, cfg)
    state = {}
    ref = params
    order = pl._epoch_order(len(data.train), cfg.seed, "train", 0)
    for idx in pl._batches(order, cfg.batch_size):
        _, g = am.loss_and_grads(ref, data.train.z_orig[idx], data.train.z_aug[idx],
                                 data.train.target[idx])
        ref = pl.ecos.adam_step(ref, g, state, cfg.ecos.lr)
    for k in params:
        np.testing.assert_array_equal(trained[k], ref[k])


def test_ablate_rows(series):
    rows = pl.ablate(small_cfg(epochs=1, pretrain_epochs=1), series=series, seeds=(0,))
    assert [r["config"] for r in rows] == list(pl.ABLATIONS)
    assert all(np.isfinite(r["mse"]) and np.isfinite(r["mae"]) for r in rows)


def test_freeze_qk(series):
    cfg = small_cfg(freeze_qk=True, use_neg_pretrain=False)
    params, _, _ = pl.train_model(cfg, series)
    init = am.init_params(cfg.model_config(), cfg.seed)
    for k in ("w_q", "b_q", "w_k", "b_k"):
        np.testing.assert_array_equal(params[k], init[k])
    assert not np.array_equal(params["w_v"], init["w_v"])


def test_stage_named_in_errors():
    short = TimeSeries.from_array([np.arange(30.0)])
    with pytest.raises(pl.PipelineError, match=r"\[prepare\]"):
        pl.run(small_cfg(), series=short)


def test_config_json_round_trip(tmp_path):
    cfg = small_cfg(use_ecos=False, ecos=pl.ecos.EcosConfig(rho=0.9))
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert pl.RunConfig.load(path) == cfg
    with pytest.raises(ValueError):
        pl.RunConfig.from_dict({"nope": 1})
