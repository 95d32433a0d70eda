import csv

import numpy as np
import pytest

from lshg.checkpoint import decode
from lshg.errors import ConfigError, NumericError, ShapeError
from lshg.hourglass import build_network
from lshg.pipeline.synth import make_synthetic_dataset
from lshg.pipeline.train import (OptimizerState, TrainConfig, batches, heatmap_loss, rmsprop_step, train,
                                 worker_count)

from conftest import tiny_config


def test_loss_zero_for_perfect_predictions(rng):
    t = rng.random((2, 16, 8, 8))
    loss, grads = heatmap_loss([t.copy(), t.copy()], t, np.ones((2, 16)))
    assert loss == 0.0 and all(not g.any() for g in grads)


def test_loss_constant_offset_is_one(rng):
    t = rng.random((3, 16, 8, 8))
    loss, _ = heatmap_loss([t + 1], t, np.ones((3, 16)))
    assert loss == pytest.approx(1.0)


def test_masked_loss_matches_recount(rng):
    p = [rng.normal(size=(2, 16, 4, 4)) for _ in range(2)]
    t = rng.random((2, 16, 4, 4))
    w = np.ones((2, 16))
    w[0, 3] = w[1, 7] = 0
    loss, _ = heatmap_loss(p, t, w)
    expected = 0.0
    for pred in p:
        total, cells = 0.0, 0
        for n in range(2):
            for j in range(16):
                if w[n, j]:
                    total += ((pred[n, j] - t[n, j]) ** 2).sum()
                    cells += 16
        expected += total / cells
    assert loss == pytest.approx(expected, rel=1e-12)


def test_loss_gradient_finite_differences(rng):
    p = [rng.normal(size=(2, 16, 3, 3))]
    t = rng.random((2, 16, 3, 3))
    w = (rng.random((2, 16)) < 0.7).astype(float)
    _, (g,) = heatmap_loss(p, t, w)
    h = 1e-6
    for idx in [(0, 0, 0, 0), (1, 5, 2, 1), (0, 15, 1, 2)]:
        q = p[0].copy()
        q[idx] += h
        up = heatmap_loss([q], t, w)[0]
        q[idx] -= 2 * h
        down = heatmap_loss([q], t, w)[0]
        assert g[idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-10)


def test_loss_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        heatmap_loss([np.zeros((1, 16, 4, 4))], np.zeros((1, 16, 8, 8)), np.ones((1, 16)))


def test_rmsprop_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st = OptimizerState(v={"w": np.array([0.5, 0.25])})
    rmsprop_step(p, {"w": np.zeros(2)}, st)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    np.testing.assert_allclose(st.v["w"], [0.495, 0.2475])


def test_rmsprop_first_step_closed_form():
    p = {"w": np.array([0.0])}
    st = OptimizerState()
    rmsprop_step(p, {"w": np.array([1.0])}, st)
    assert st.v["w"][0] == pytest.approx(0.01)
    assert -p["w"][0] == pytest.approx(5e-4 / (0.1 + 1e-8), rel=1e-12)
    assert -p["w"][0] == pytest.approx(4.9999995e-3, rel=1e-12)
    # the commonly quoted "~4.99999995e-3" agrees only to about 1e-7 relative
    assert -p["w"][0] == pytest.approx(4.99999995e-3, rel=1e-6)
    assert st.step == 1


def test_rmsprop_descends_quadratic():
    p = {"p": np.array([1.0])}
    st = OptimizerState()
    prev = 1.0
    for _ in range(100):
        rmsprop_step(p, {"p": 2 * p["p"]}, st)
        assert abs(p["p"][0]) < prev
        prev = abs(p["p"][0])
    assert (st.v["p"] >= 0).all() and st.v["p"].shape == p["p"].shape


def test_rmsprop_refuses_nan():
    p = {"a": np.ones(2), "b": np.ones(2)}
    st = OptimizerState()
    with pytest.raises(NumericError):
        rmsprop_step(p, {"a": np.ones(2), "b": np.array([1.0, np.nan])}, st)
    np.testing.assert_array_equal(p["a"], 1.0)
    assert st.step == 0 and not st.v


def test_batches_padding_and_errors():
    order = np.arange(5)
    assert [len(b) for b in batches(order, 2, False)] == [2, 2, 1]
    padded = batches(order, 2, True)
    np.testing.assert_array_equal(padded[-1], [4, 0])
    with pytest.raises(ConfigError):
        batches(np.arange(3), 4, False)
    np.testing.assert_array_equal(batches(np.arange(3), 4, True)[0], [0, 1, 2, 0])


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("LSHG_THREADS", "3")
    assert worker_count() == 3
    assert worker_count(2) == 2


@pytest.fixture(scope="module")
def data():
    return make_synthetic_dataset(5, 2, image_size=96)


def run(tmp, data, **kw):
    cfg = dict(epochs=2, batch_size=2, seed=4, augment=True, out_dir=str(tmp))
    cfg.update(kw)
    net = build_network(tiny_config(), seed=cfg["seed"])
    return net, train(net, data, TrainConfig(**cfg))


def test_training_is_deterministic_and_thread_independent(tmp_path, data):
    _, a = run(tmp_path / "a", data, threads=1)
    _, b = run(tmp_path / "b", data, threads=3)
    assert a.history == b.history and a.step_losses == b.step_losses
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
    assert len(a.step_losses) == 2 * 3


def test_loss_csv_and_checkpoints(tmp_path, data):
    _, r = run(tmp_path, data, epochs=3)
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["epoch", "mean_loss", "wall_seconds"]
    assert [int(x[0]) for x in rows[1:]] == [0, 1, 2]
    assert [float(x[1]) for x in rows[1:]] == r.history
    assert r.best_checkpoint.exists() and r.final_checkpoint.exists()


def test_zero_epochs_keeps_initialization(tmp_path, data):
    net, r = run(tmp_path, data, epochs=0)
    assert r.history == [] and r.best_checkpoint is None
    _, state = decode(r.final_checkpoint.read_bytes())
    init = build_network(tiny_config(), seed=4).state()
    assert all(state[k].tobytes() == v.tobytes() for k, v in init.items())


def test_dataset_smaller_than_batch(tmp_path, data):
    with pytest.raises(ConfigError):
        run(tmp_path, data[:1], batch_size=2)
    _, r = run(tmp_path, data[:1], batch_size=2, pad_last_batch=True, epochs=1)
    assert len(r.history) == 1


def test_empty_dataset(tmp_path):
    with pytest.raises(ConfigError):
        run(tmp_path, [])


def test_loss_decreases_without_augmentation(tmp_path, data):
    _, r = run(tmp_path, data[:2], augment=False, epochs=15, batch_size=2)
    assert r.history[-1] < 0.5 * r.history[0]
