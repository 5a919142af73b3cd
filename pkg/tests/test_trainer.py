import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ragl import trainer as TR
from ragl.data import TrafficSeries, normalize, split_and_window, synth_generate
from ragl.model import ModelConfig, ParameterSet
from ragl.tensor import parameter


# ---- optimiser


def test_adam_zero_gradient_leaves_params():
    p = {"w": parameter(np.array([1.0, -2.0]))}
    state = TR.AdamState()
    TR.adam_step(p, {"w": np.zeros(2)}, state, 0.01)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    assert state.step == 1


@given(st.floats(-100, 100).filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1e-1))
def test_adam_first_step_is_sign(g, lr):
    p = {"w": parameter(np.array([0.0]))}
    TR.adam_step(p, {"w": np.array([g])}, TR.AdamState(), lr)
    expected = -lr * g / (abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"].data, [expected], rtol=1e-12)
    assert abs(abs(p["w"].data[0]) - lr) < lr * 1e-4


def test_adam_symmetric_parameters_move_together():
    p = {"a": parameter(np.ones(3)), "b": parameter(np.ones(3))}
    state = TR.AdamState()
    rng = np.random.default_rng(0)
    for _ in range(5):
        g = rng.standard_normal(3)
        TR.adam_step(p, {"a": g, "b": g.copy()}, state, 0.01)
    np.testing.assert_array_equal(p["a"].data, p["b"].data)


def test_adam_matches_reference_recursion():
    rng = np.random.default_rng(1)
    w = rng.standard_normal(4)
    p = {"w": parameter(w.copy())}
    state = TR.AdamState()
    m = np.zeros(4)
    v = np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        TR.adam_step(p, {"w": g}, state, 0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)


def test_adam_nan_gradient_names_parameter():
    p = {"layers.0.fc1.w": parameter(np.zeros(2))}
    with pytest.raises(TR.NonFiniteGradientError, match="layers.0.fc1.w"):
        TR.adam_step(p, {"layers.0.fc1.w": np.array([np.nan, 0.0])}, TR.AdamState(), 0.1)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = TR.clip_global_norm(grads, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])
    same, _ = TR.clip_global_norm(grads, 10.0)
    assert same is grads


def test_clip_handles_huge_finite_gradients():
    grads = {"a": np.array([3e300]), "b": np.array([4e300])}
    clipped, norm = TR.clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5e300)
    np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])


# ---- schedule


@pytest.mark.parametrize("epoch,lr", [(0, 0.002), (39, 0.002), (40, 0.001), (80, 0.0005),
                                      (199, 0.002 * 0.5**4)])
def test_lr_schedule(epoch, lr):
    assert TR.lr_at(epoch) == lr


def test_lr_negative_epoch():
    with pytest.raises(ValueError):
        TR.lr_at(-1)


def test_memory_budget_halves_batch():
    cfg = ModelConfig(n_nodes=100)
    per = TR.bytes_per_sample(cfg)
    sched = TR.TrainSchedule(batch_size=64, memory_budget_bytes=per * 20)
    assert TR.fit_batch_size(cfg, sched) == 16
    assert TR.fit_batch_size(cfg, TR.TrainSchedule(batch_size=64)) == 64


# ---- metrics


def test_metrics_perfect():
    truth = np.random.default_rng(0).uniform(1, 5, (3, 2, 12, 1))
    rep = TR.compute_metrics(truth, truth)
    assert rep.average == (0.0, 0.0, 0.0)
    assert all(v == (0.0, 0.0, 0.0) for v in rep.horizons.values())
    assert sorted(rep.horizons) == [3, 6, 12]


def test_metrics_unit_offset():
    truth = np.full((2, 3, 12, 1), 4.0)
    rep = TR.compute_metrics(truth + 1, truth)
    assert rep.average == (1.0, 1.0, 25.0)
    assert rep.horizons[6] == (1.0, 1.0, 25.0)


def test_metrics_hand_values():
    truth = np.zeros((1, 1, 3, 1))
    truth[0, 0, :, 0] = [1.0, 2.0, 4.0]
    pred = np.zeros_like(truth)
    pred[0, 0, :, 0] = [2.0, 2.0, 1.0]
    rep = TR.compute_metrics(pred, truth, horizons=(1, 3))
    mae, rmse, mape = rep.average
    assert mae == pytest.approx(4 / 3)
    assert rmse == pytest.approx(math.sqrt(10 / 3))
    assert mape == pytest.approx((1.0 + 0.0 + 0.75) / 3 * 100)
    assert rep.horizons[3] == pytest.approx((3.0, 3.0, 75.0))


def test_metrics_mask_small_truth():
    truth = np.array([0.0, 2.0]).reshape(1, 1, 2, 1)
    pred = np.array([1.0, 3.0]).reshape(1, 1, 2, 1)
    rep = TR.compute_metrics(pred, truth, horizons=())
    assert rep.average[2] == 50.0
    assert rep.masked == 1


@given(st.integers(0, 10_000))
def test_rmse_dominates_mae(seed):
    rng = np.random.default_rng(seed)
    truth = rng.uniform(-5, 5, (4, 3, 12, 1))
    pred = truth + rng.standard_normal(truth.shape) * rng.uniform(0, 3)
    rep = TR.compute_metrics(pred, truth)
    for mae, rmse, _ in [rep.average, *rep.horizons.values()]:
        assert rmse >= mae - 1e-12


def test_average_is_mean_of_per_step_errors():
    rng = np.random.default_rng(3)
    truth = rng.uniform(1, 2, (5, 4, 12, 1))
    pred = truth + rng.standard_normal(truth.shape)
    rep = TR.compute_metrics(pred, truth, horizons=tuple(range(1, 13)))
    assert rep.average[0] == pytest.approx(np.mean([rep.horizons[h][0] for h in range(1, 13)]))


def test_report_format_round_trip():
    rng = np.random.default_rng(4)
    truth = rng.uniform(1, 2, (5, 4, 12, 1))
    rep = TR.compute_metrics(truth + rng.standard_normal(truth.shape), truth)
    back = TR.MetricsReport.parse(rep.format())
    assert back == rep
    assert "H12" in rep.pretty()


def test_metrics_shape_mismatch():
    with pytest.raises(ValueError):
        TR.compute_metrics(np.zeros((1, 1, 2, 1)), np.zeros((1, 1, 3, 1)))


# ---- training


def sinusoid_splits(n=4, steps=1200, period=17):
    t = np.arange(steps)
    phase = np.linspace(0, 2 * np.pi, n, endpoint=False)
    vals = np.cos(2 * np.pi * t[:, None] / period + phase)[:, :, None]
    return normalize(split_and_window(TrafficSeries(vals, 0, 900), (0.6, 0.2, 0.2), 4, 4))


def tiny_cfg(n, **kw):
    base = dict(n_nodes=n, horizon_in=4, horizon_out=4, d_in=8, d_tid=2, d_diw=2, d_node=4)
    base.update(kw)
    return ModelConfig(**base)


def test_realizable_linear_task_is_learned():
    # each future value of a pure sinusoid is a fixed linear map of the last two inputs
    splits, stats = sinusoid_splits()
    cfg = tiny_cfg(4, sse_p=0.0)
    res = TR.train(cfg, TR.TrainSchedule(epochs=50, batch_size=32), splits, stats,
                   stop_when=lambda rec: rec.val_mae <= 1e-2)
    assert res.best_val_mae <= 1e-2
    assert len(res.history) <= 50


def quick_splits(seed=0):
    series = synth_generate(n_nodes=5, steps=400, seed=seed)
    return normalize(split_and_window(series, (0.6, 0.2, 0.2), 4, 4))


def test_training_is_deterministic():
    splits, stats = quick_splits()
    cfg = tiny_cfg(5, sse_p=0.0)
    sched = TR.TrainSchedule(epochs=2, batch_size=32, seed=3)
    a = TR.train(cfg, sched, splits, stats)
    b = TR.train(cfg, sched, splits, stats)
    assert [(r.train_loss, r.val_mae) for r in a.history] == [(r.train_loss, r.val_mae) for r in b.history]
    cfg = tiny_cfg(5, sse_p=0.3)
    a = TR.train(cfg, sched, splits, stats)
    b = TR.train(cfg, sched, splits, stats)
    assert [r.val_mae for r in a.history] == [r.val_mae for r in b.history]


def test_best_checkpoint_is_kept():
    splits, stats = quick_splits()
    cfg = tiny_cfg(5)
    res = TR.train(cfg, TR.TrainSchedule(epochs=4, batch_size=32), splits, stats)
    best = min(res.history, key=lambda r: r.val_mae)
    assert res.best_epoch == best.epoch and res.best_val_mae == best.val_mae
    again = TR.val_mae(cfg, res.params, stats, splits.val)
    assert again == pytest.approx(res.best_val_mae, rel=1e-12)


def test_training_reduces_error():
    splits, stats = quick_splits(1)
    cfg = tiny_cfg(5)
    before = TR.val_mae(cfg, ParameterSet.init(cfg, seed=0), stats, splits.val)
    res = TR.train(cfg, TR.TrainSchedule(epochs=5, batch_size=32), splits, stats)
    assert res.best_val_mae < 0.5 * before


def test_empty_validation_rejected():
    series = synth_generate(n_nodes=3, steps=100, seed=0)
    splits, stats = normalize(split_and_window(series, (0.6, 0.2, 0.2), 12, 12))
    with pytest.raises(ValueError):
        TR.train(tiny_cfg(3, horizon_in=12, horizon_out=12), TR.TrainSchedule(epochs=1),
                 splits, stats)


@pytest.mark.filterwarnings("ignore:overflow")
@pytest.mark.filterwarnings("ignore:invalid value")
def test_divergence_is_reported():
    splits, stats = quick_splits()
    cfg = tiny_cfg(5)
    params = ParameterSet.init(cfg)
    params.head_node_w.data[...] = 1e308
    with pytest.raises(TR.TrainingDivergedError, match="epoch 0, batch 0"):
        TR.train(cfg, TR.TrainSchedule(epochs=1), splits, stats, params=params)


def test_evaluate_and_history_io(tmp_path):
    splits, stats = quick_splits()
    cfg = tiny_cfg(5)
    res = TR.train(cfg, TR.TrainSchedule(epochs=2, batch_size=32), splits, stats)
    rep = TR.evaluate(cfg, res.params, stats, splits.test, horizons=(1, 4))
    assert sorted(rep.horizons) == [1, 4] and rep.samples == len(splits.test)
    path = tmp_path / "h.tsv"
    TR.write_history(res.history, path)
    back = TR.read_history(path)
    assert [r.val_mae for r in back] == [r.val_mae for r in res.history]
