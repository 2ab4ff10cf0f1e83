import json

import numpy as np
import pytest

from compliant.errors import CollectionError, ConfigError, TrainingError
from compliant.learn import (
    Anchor, Dataset, Layer, SampleSet, Standardizer, SurrogateModel, TrainConfig, collect,
    compute_anchor, forward, grid_points, hidden_width, init_layers, load_dataset, loss_and_grads,
    save_dataset, sidecar_paths, train,
)
from compliant.robot import robot_from_config

from conftest import bar_config


@pytest.fixture(scope="module")
def bar_data():
    model = robot_from_config(bar_config(gravity=True))
    return model, collect(model, [(0.0, 2.0)], 6, seed=3)


def fake_dataset(n=24, seed=0):
    """Smooth synthetic map from 2 actuations to a 3x3 W and 2 free violations."""
    rng = np.random.default_rng(seed)

    def make(k):
        da = rng.uniform(0, 1, (k, 2))
        W_tri = np.column_stack([np.sin(da[:, 0]), da[:, 0] * da[:, 1], np.cos(da[:, 1]),
                                 1 + da[:, 0] ** 2, 0.1 * da[:, 1], 2 - da[:, 1]])
        return SampleSet(da, W_tri, 0.5 * da[:, ::-1])

    anchor = Anchor(np.array([0.0, 0, 1, 1, 0, 2]), np.zeros(2), np.zeros(2), 3, 1)
    return Dataset(make(n), make(max(1, n // 4)), anchor, {"robot": "fake"})


def test_standardizer_moments_and_round_trip():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 3)) * [1, 10, 0] + [0, 5, 7]
    s = Standardizer.fit(X)
    Z = s.apply(X)
    np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(Z[:, :2].std(axis=0), 1.0)
    assert s.std[2] == 1.0  # constant column is left unscaled
    np.testing.assert_allclose(s.invert(Z), X)


def test_relu_hidden_identity_output():
    eye = Layer(np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(forward([eye, eye], np.array([[-1.0, 2.0]])), [[0.0, 2.0]])
    # the output layer is linear, so negative outputs survive
    np.testing.assert_array_equal(forward([eye], np.array([[-1.0, 2.0]])), [[-1.0, 2.0]])


def test_zero_network_predicts_output_means():
    ds = fake_dataset()
    model, _ = train(ds, TrainConfig(hidden=(4, 4), epochs=1))
    for l in model.layers:
        l.w[:] = 0.0
        l.b[:] = 0.0
    out = model.predict_raw([0.3, 0.4])[0]
    np.testing.assert_allclose(out, model.y_stats.mean)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    layers = init_layers([3, 5, 4, 2], rng)
    for l in layers:
        l.b[:] = rng.standard_normal(l.b.shape) * 0.1
    X, Y = rng.standard_normal((7, 3)), rng.standard_normal((7, 2))
    _, grads = loss_and_grads(layers, X, Y)
    h = 1e-6
    num, ana = [], []
    for l, g in zip(layers, grads):
        for p, gp in ((l.w, g.w), (l.b, g.b)):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                lp, _ = loss_and_grads(layers, X, Y)
                p[idx] = old - h
                lm, _ = loss_and_grads(layers, X, Y)
                p[idx] = old
                num.append((lp - lm) / (2 * h))
                ana.append(gp[idx])
    num, ana = np.array(num), np.array(ana)
    assert np.linalg.norm(num - ana) / np.linalg.norm(ana) <= 1e-5


def test_training_is_deterministic():
    ds = fake_dataset()
    cfg = TrainConfig(hidden=(8, 8), epochs=30, batch=8, seed=5)
    a, _ = train(ds, cfg)
    b, _ = train(ds, cfg)
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
    c, _ = train(ds, TrainConfig(hidden=(8, 8), epochs=30, batch=8, seed=6))
    assert not np.array_equal(a.layers[0].w, c.layers[0].w)


def test_memorizes_a_small_smooth_set():
    ds = fake_dataset(n=16)
    ds = Dataset(ds.train, ds.train, ds.anchor)
    model, curve = train(ds, TrainConfig(hidden=(32, 32), epochs=1500, batch=16, lr=3e-3))
    assert model.meta["best_test_loss"] < 1e-3 < curve["test"][0]
    W, da_free = model.predict(ds.train.delta_a[0])
    np.testing.assert_allclose(W, W.T)
    np.testing.assert_allclose(da_free, ds.train.delta_a_free[0], atol=0.05)


def test_best_checkpoint_and_patience():
    ds = fake_dataset()
    model, curve = train(ds, TrainConfig(hidden=(4,), n_layers=2, epochs=200, patience=5, lr=0.05))
    best = model.meta["best_epoch"]
    assert model.meta["best_test_loss"] == min(curve["test"])
    assert curve["test"][best] == model.meta["best_test_loss"]
    assert len(curve["test"]) - 1 <= best + 6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    with pytest.raises(TrainingError):
        train(fake_dataset(), TrainConfig(hidden=(8, 8), epochs=50, lr=1e300))


def test_hidden_width_weight_budget():
    # 5 h + h^2 + 5 h <= 400 gives h = 15
    assert hidden_width(5, 5, 3, 400) == 15
    assert hidden_width(5, 5, 1, 400) == 0


def test_grid_order_last_cable_fastest():
    g = grid_points([(0, 1), (0, 2)], 3)
    np.testing.assert_array_equal(g[:4], [[0, 0], [0, 1], [0, 2], [0.5, 0]])
    assert len(g) == 9


def test_dataset_csv_round_trip(tmp_path):
    ds = fake_dataset()
    path = tmp_path / "d.csv"
    save_dataset(ds, path)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:2] == ["delta_a_0", "delta_a_1"] and header[2] == "W_tri_0"
    assert header[-1] == "delta_a_free_1"
    back = load_dataset(path)
    for a, b in ((ds.train, back.train), (ds.test, back.test)):
        np.testing.assert_array_equal(a.delta_a, b.delta_a)
        np.testing.assert_array_equal(a.W_tri, b.W_tri)
        np.testing.assert_array_equal(a.delta_a_free, b.delta_a_free)
    np.testing.assert_array_equal(back.anchor.W_tri, ds.anchor.W_tri)
    assert all(p.exists() for p in sidecar_paths(path))


def test_collection_zero_range_reproduces_anchor():
    model = robot_from_config(bar_config())
    ds = collect(model, [(0.0, 0.0)], 1)
    _, anchor = compute_anchor(model)
    assert len(ds.train) == 1 and len(ds.test) == 1
    np.testing.assert_allclose(ds.train.W_tri[0], anchor.W_tri, rtol=1e-8)
    np.testing.assert_allclose(ds.train.delta_a_free[0], anchor.delta_a_free, atol=1e-10)


def test_collection_layout(bar_data):
    model, ds = bar_data
    assert ds.meta["n_train"] == 6 and ds.meta["n_test"] == 2 and ds.meta["skipped"] == []
    # gravity shortens the cable a little, so the slack s = 0 point keeps the free pull-in
    free = ds.anchor.delta_a[0]
    assert 0 < free < 0.4
    np.testing.assert_allclose(ds.train.delta_a[:, 0], [free, 0.4, 0.8, 1.2, 1.6, 2.0], atol=1e-8)
    assert ds.train.W_tri.shape == (6, 10)
    assert np.all((ds.test.delta_a >= 0) & (ds.test.delta_a <= 2))


def test_collection_rejects_bad_arguments(bar_data):
    model, _ = bar_data
    with pytest.raises(CollectionError):
        collect(model, [(0, 1), (0, 1)], 3)
    with pytest.raises(CollectionError):
        collect(model, [(0, 1)], 0)


def test_collection_independent_of_jobs(bar_data):
    model, ds = bar_data
    other = collect(model, [(0.0, 2.0)], 6, seed=3, jobs=2)
    np.testing.assert_array_equal(other.train.W_tri, ds.train.W_tri)
    np.testing.assert_array_equal(other.test.delta_a, ds.test.delta_a)


def test_model_file_round_trip_and_validation(tmp_path, bar_data):
    _, ds = bar_data
    model, _ = train(ds, TrainConfig(hidden=(6, 6), epochs=20, batch=4))
    path = tmp_path / "m.json"
    model.save(path)
    back = SurrogateModel.load(path)
    np.testing.assert_array_equal(back.predict_raw([1.3]), model.predict_raw([1.3]))
    d = json.loads(path.read_text())
    del d["meta"]["optimizer"]
    path.write_text(json.dumps(d))
    with pytest.raises(ConfigError, match="optimizer"):
        SurrogateModel.load(path)
    path.write_text("{")
    with pytest.raises(ConfigError):
        SurrogateModel.load(path)


def test_training_hull_flags(bar_data):
    _, ds = bar_data
    model, _ = train(ds, TrainConfig(hidden=(4, 4), epochs=2))
    np.testing.assert_array_equal(model.outside_hull(np.array([1.0])), [False])
    np.testing.assert_array_equal(model.outside_hull(np.array([2.5])), [True])
    with pytest.raises(ValueError):
        model.predict_raw([1.0, 2.0])
