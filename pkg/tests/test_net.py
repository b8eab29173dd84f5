import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gaussconv.gconv import GaussConvLayer
from gaussconv.net import (
    ADAM_BETAS,
    ConfigError,
    Dataset,
    LayerSpec,
    NetworkConfig,
    StandardConvLayer,
    TrainingDivergedError,
    build_model,
    default_config,
    evaluate,
    load_model,
    metrics_from_errors,
    mse_density_loss,
    predict_count,
    save_model,
    synthesize_dataset,
    tiny_config,
    train,
)
from oracles import central_difference, naive_conv_same


@pytest.fixture(scope="module")
def small_data():
    return synthesize_dataset(8, size=16, count_range=(2, 6), seed=3)


def micro_config(kind, seed=0, fusion=False):
    cols = [
        [LayerSpec(2, 2, 2, (-0.5, 0.5), pool=True), LayerSpec(2, 1, 2, (-0.1, 0.1))],
        [LayerSpec(2, 2, 3, (-0.5, 0.5), pool=True), LayerSpec(1, 1, 2, (-0.1, 0.1))],
    ]
    return NetworkConfig(columns=cols, conv_kind=kind, seed=seed, fusion=fusion, bank_size=30)


class TestConfig:
    def test_default_structure(self):
        cfg = default_config()
        assert len(cfg.columns) == 3
        assert all(col[0].k == 16 and col[1].k == 16 for col in cfg.columns)
        assert all(col[0].sigma_range == (-0.5, 0.5) and col[2].sigma_range == (-0.1, 0.1) for col in cfg.columns)
        assert {col[2].k for col in cfg.columns} <= {2, 4}

    def test_dict_roundtrip(self):
        cfg = default_config("standard", 4)
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg

    def test_validation(self):
        with pytest.raises(ConfigError):
            build_model(NetworkConfig(columns=[], conv_kind="gaussian"))
        with pytest.raises(ConfigError):
            build_model(tiny_config().with_kind("dense"))
        uneven = NetworkConfig(columns=[[LayerSpec(2, 1, 2, pool=True)], [LayerSpec(2, 1, 2)]])
        with pytest.raises(ConfigError):
            build_model(uneven)
        with pytest.raises(ConfigError):
            build_model(NetworkConfig(columns=[[LayerSpec(2, 1, 2, (-0.5, 0.5))]]))


class TestBuild:
    def test_structural_parity(self):
        g = build_model(default_config("gaussian"))
        s = build_model(default_config("standard"))
        assert len(g.layers) == len(s.layers)
        assert [l.c_out for l in g.layers] == [l.c_out for l in s.layers]
        assert [l.c_in for l in g.layers] == [l.c_in for l in s.layers]

    def test_layer_k(self):
        m = build_model(default_config("gaussian"))
        for col in m.columns:
            assert all(isinstance(layer, GaussConvLayer) for layer in col)
            assert col[0].k == 16 and col[1].k == 16
            assert col[2].k in (2, 4)

    def test_means_on_pixel_lattice(self):
        for col in build_model(default_config("gaussian")).columns:
            for layer in col:
                np.testing.assert_array_equal(layer.means, np.round(layer.means))
                assert np.abs(layer.means).max() <= layer.grid_radius

    def test_deterministic(self):
        a = build_model(tiny_config(seed=5)).to_dict()
        b = build_model(tiny_config(seed=5)).to_dict()
        assert a == b
        assert a != build_model(tiny_config(seed=6)).to_dict()

    @pytest.mark.parametrize("make", [default_config, tiny_config])
    def test_fewer_parameters(self, make):
        assert build_model(make("gaussian")).n_params() <= build_model(make("standard")).n_params()

    def test_checkpoint_roundtrip(self, tmp_path, small_data):
        m = build_model(micro_config("gaussian", fusion=True))
        save_model(m, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(back.forward(small_data.images)[0], m.forward(small_data.images)[0])

    def test_input_checks(self):
        m = build_model(micro_config("standard"))
        with pytest.raises(ConfigError):
            m.forward(np.zeros((1, 2, 16, 16)))
        with pytest.raises(ConfigError):
            m.forward(np.zeros((1, 1, 18, 18)))


def test_standard_conv_matches_naive():
    from gaussconv.net import _std_forward

    rng = np.random.default_rng(0)
    layer = StandardConvLayer(rng.normal(size=(2, 3, 5, 5)), rng.normal(size=2))
    x = rng.normal(size=(1, 3, 9, 9))
    y, _ = _std_forward(x, layer)
    for o in range(2):
        expect = sum(naive_conv_same(x[0, i], layer.weight[o, i]) for i in range(3)) + layer.bias[o]
        np.testing.assert_allclose(y[0, o], expect, atol=1e-12)


@pytest.mark.parametrize("kind,fusion", [("gaussian", False), ("gaussian", True), ("standard", True)])
def test_model_gradients(kind, fusion, small_data):
    model = build_model(micro_config(kind, fusion=fusion))
    rng = np.random.default_rng(1)
    # zero biases put all-dead regions exactly on the ReLU kink
    for layer in model.layers:
        layer.bias[:] = rng.uniform(0.05, 0.2, size=layer.bias.shape) * rng.choice([-1, 1], size=layer.bias.shape)
    x = small_data.images[:2]
    target = small_data.densities[:2] * 100

    def loss():
        return mse_density_loss(model.forward(x)[0], target)[0]

    pred, cache = model.forward(x)
    grads = model.backward(cache, mse_density_loss(pred, target)[1])
    for (layer, name), g in zip(model.parameters(), grads):
        arr = getattr(layer, name)
        assert g.shape == arr.shape
        for flat in rng.choice(arr.size, size=min(arr.size, 3), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            numeric = central_difference(loss, arr, idx)
            assert g[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7), (type(layer).__name__, name, idx)


class TestLossAndMetrics:
    def test_loss_values(self):
        t = np.random.default_rng(0).random((4, 5))
        assert mse_density_loss(t, t)[0] == 0
        assert mse_density_loss(t + 1, t)[0] == pytest.approx(1.0)
        with pytest.raises(ValueError):
            mse_density_loss(t, t[:3])

    def test_loss_gradient(self):
        rng = np.random.default_rng(1)
        p, t = rng.random((2, 3, 4))
        _, g = mse_density_loss(p, t)
        for idx in [(0, 0), (2, 3), (1, 2)]:
            assert g[idx] == pytest.approx(central_difference(lambda: mse_density_loss(p, t)[0], p, idx), abs=1e-6)

    def test_metrics_closed_forms(self):
        assert metrics_from_errors([0, 0]) == (0, 0)
        assert metrics_from_errors([2, 2, 2]) == pytest.approx((2, 2))
        mae, rmse = metrics_from_errors([3, -1])
        assert mae == 2 and rmse == pytest.approx(math.sqrt(5))

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=30))
    def test_rmse_not_below_mae(self, errs):
        mae, rmse = metrics_from_errors(errs)
        assert rmse >= mae - 1e-9 * max(1, mae)

    def test_counts_of_zero_and_truth(self, small_data):
        m = build_model(micro_config("standard"))
        for layer in m.layers:
            for name in layer.param_names():
                getattr(layer, name)[...] = 0
        assert predict_count(m, small_data.images[0]) == 0
        truth = small_data.densities.sum(axis=(1, 2))
        assert np.all(np.abs(truth - small_data.counts) <= 0.01 * small_data.counts + 0.5)


class TestSynthetic:
    def test_shapes_and_bounds(self):
        d = synthesize_dataset(5, size=32, count_range=(3, 9), seed=1)
        assert d.images.shape == (5, 1, 32, 32) and d.densities.shape == (5, 32, 32)
        assert all(3 <= len(p) <= 9 for p in d.points)
        assert all(np.all((p >= 0) & (p < 32)) for p in d.points)

    def test_deterministic(self):
        a, b = synthesize_dataset(3, seed=9), synthesize_dataset(3, seed=9)
        assert a.images.tobytes() == b.images.tobytes()

    def test_with_points(self, small_data):
        moved = small_data.with_points([p[:1] for p in small_data.points])
        np.testing.assert_allclose(moved.densities.sum(axis=(1, 2)), 1.0, atol=0.3)
        assert moved.images is small_data.images


class TestTrain:
    def test_zero_lr_freezes(self, small_data):
        cfg = micro_config("gaussian")
        state, _ = train(cfg, small_data, 2, lr=0.0, batch_size=4)
        fresh = build_model(cfg)
        for (a, n), (b, _) in zip(state.model.parameters(), fresh.parameters()):
            np.testing.assert_array_equal(getattr(a, n), getattr(b, n))

    def test_deterministic(self, small_data):
        cfg = micro_config("gaussian", seed=2)
        _, r1 = train(cfg, small_data, 2, batch_size=4)
        _, r2 = train(cfg, small_data, 2, batch_size=4)
        assert r1.rows == r2.rows

    def test_report_records_optimizer(self, small_data):
        _, rep = train(micro_config("standard"), small_data, 1, batch_size=4, schedule="constant")
        opt = rep.config["optimizer"]
        assert opt["betas"] == list(ADAM_BETAS) and opt["lr"] == 1e-3
        assert set(rep.rows[0]) == {"epoch", "median_loss", "mae", "mse"}

    def test_loss_decreases_tiny_model(self):
        data = synthesize_dataset(50, size=32, count_range=(3, 20), seed=4)
        state, _ = train(tiny_config("gaussian"), data, 20, lr=3e-3, batch_size=5)
        assert len(state.loss_history) == 200
        assert np.mean(state.loss_history[-10:]) < np.mean(state.loss_history[:10])

    def test_divergence_reports_state(self, small_data):
        bad = Dataset(small_data.images, small_data.densities + np.inf, small_data.points)
        with pytest.raises(TrainingDivergedError) as exc:
            train(micro_config("standard"), bad, 1, batch_size=4)
        assert exc.value.state.step == 0

    def test_errors(self, small_data):
        with pytest.raises(ValueError):
            train(micro_config("standard"), small_data, 1, schedule="step")
        with pytest.raises(ValueError):
            evaluate(build_model(micro_config("standard")), small_data.subset([]))
