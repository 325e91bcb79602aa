import json

import numpy as np
import pytest

from flowcast.dataio import WindowedDataset
from flowcast.errors import ConfigError, NumericError
from flowcast.nn import DenseLayer, build_network, init_network
from flowcast.train import (
    AdamState,
    TrainConfig,
    TrainReport,
    adam_step,
    backward,
    clip_gradients,
    global_norm,
    grad_check,
    grad_check_tensors,
    mse_loss,
    parameter_checksum,
    train,
)

SMALL = {"n_features": 4, "indrnn_widths": [6], "lstm_width": 5, "window_length": 8}


def small_problem(seed, batch=3, **arch):
    rng = np.random.default_rng(seed)
    net = init_network(dict(SMALL, seed=seed, **arch))
    return net, rng.normal(size=(batch, 8, 4)), rng.normal(size=batch)


def toy_dataset(n=40, L=4, F=2, seed=0):
    rng = np.random.default_rng(seed)
    return WindowedDataset(rng.normal(size=(n, L, F)), rng.normal(size=n), L)


class TestLoss:
    def test_examples(self):
        assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert mse_loss([0.0], [2.0]) == 4.0
        assert mse_loss([1.0, 3.0], [2.0, 5.0]) == 2.5

    def test_errors(self):
        with pytest.raises(ValueError):
            mse_loss([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            mse_loss([], [])


class TestBackward:
    def test_zero_network(self):
        net = build_network({"n_features": 2, "indrnn_widths": [3], "lstm_width": 4})
        net.head.bias[0] = 0.3
        targets = np.array([1.0, -2.0, 0.5])
        grads, loss = backward(net, np.random.default_rng(0).normal(size=(3, 5, 2)), targets)
        assert grads["head.bias"][0] == pytest.approx(2 * np.mean(0.3 - targets), abs=1e-15)
        assert loss == pytest.approx(np.mean((0.3 - targets) ** 2), abs=1e-15)
        for name, g in grads.items():
            if name != "head.bias":
                assert np.all(g == 0), name

    def test_duplicated_batch(self):
        net, x, y = small_problem(0)
        single, _ = backward(net, x, y)
        double, _ = backward(net, np.concatenate([x, x]), np.concatenate([y, y]))
        for name in single:
            np.testing.assert_allclose(double[name], single[name], rtol=1e-12, atol=1e-15)

    def test_batch_is_average_of_samples(self):
        net, x, y = small_problem(1, batch=5)
        batch, _ = backward(net, x, y)
        per_sample = [backward(net, x[s:s + 1], y[s:s + 1])[0] for s in range(5)]
        for name in batch:
            mean = sum(g[name] for g in per_sample) / 5
            np.testing.assert_allclose(batch[name], mean, rtol=0, atol=1e-12)

    def test_gradient_order_matches_parameters(self):
        net, x, y = small_problem(2)
        grads, _ = backward(net, x, y)
        assert list(grads) == list(net.parameters())
        for name, p in net.parameters().items():
            assert grads[name].shape == p.shape

    def test_non_finite_is_reported(self):
        net, x, y = small_problem(3)
        x[0, 2, 1] = np.nan
        with pytest.raises(NumericError, match="step"):
            backward(net, x, y)


class TestGradCheck:
    def test_head_only_network_is_exact(self):
        # with the recurrent layers zeroed the loss is quadratic in the head bias
        net = build_network(SMALL)
        net.head.bias[0] = 0.4
        x = np.random.default_rng(0).normal(size=(2, 8, 4))
        per = grad_check_tensors(net, x, np.array([1.0, -1.0]))
        assert per["head.bias"] < 1e-10

    @pytest.mark.parametrize("seed", range(3))
    def test_small_architecture(self, seed):
        net, x, y = small_problem(seed, batch=2)
        assert grad_check(net, x, y) < 1e-4

    def test_linear_candidate_and_tanh_variants(self):
        for arch in ({"candidate_tanh": True}, {"activation": "tanh", "indrnn_widths": [4, 3]}):
            net, x, y = small_problem(4, batch=2, **arch)
            assert grad_check(net, x, y) < 1e-4

    def test_corrupted_tensor_is_caught(self):
        net, x, y = small_problem(5, batch=2)
        per = grad_check_tensors(net, x, y, corrupt="lstm.Wo")
        assert per["lstm.Wo"] == pytest.approx(0.5, abs=1e-3)


class TestClipping:
    def test_small_norm_unchanged(self):
        grads = {"a": np.array([0.6, 0.8])}
        assert clip_gradients(grads, 5.0)["a"].tolist() == [0.6, 0.8]

    def test_single_entry_scaled(self):
        out = clip_gradients({"a": np.array([10.0]), "b": np.zeros(2)}, 5.0)
        assert out["a"][0] == 5.0
        assert global_norm(out) == 5.0


class TestAdam:
    def test_zero_gradient(self):
        net = init_network(dict(SMALL, seed=0))
        before = parameter_checksum(net)
        state = AdamState.zeros_like(net)
        zeros = {k: np.zeros_like(p) for k, p in net.parameters().items()}
        adam_step(net, zeros, state, TrainConfig())
        assert parameter_checksum(net) == before and state.step == 1

    @pytest.mark.parametrize("g", [3.0, -0.02, 1e-9])
    def test_first_step(self, g):
        net = build_network({"n_features": 1, "indrnn_widths": [1], "lstm_width": 1})
        cfg = TrainConfig(learning_rate=1e-3)
        grads = {k: np.zeros_like(p) for k, p in net.parameters().items()}
        grads["head.bias"] = np.array([g])
        adam_step(net, grads, AdamState.zeros_like(net), cfg)
        # bias-corrected moments are g and g*g on the first step
        expected = -cfg.learning_rate * g / (abs(g) + cfg.adam_epsilon)
        assert net.head.bias[0] == pytest.approx(expected, rel=1e-12)

    def test_u_is_clamped_after_update(self):
        net = init_network(dict(SMALL, seed=0, u_max=1.5))
        net.indrnn[0].u[...] = 1.9
        grads = {k: np.zeros_like(p) for k, p in net.parameters().items()}
        adam_step(net, grads, AdamState.zeros_like(net), TrainConfig())
        assert np.all(net.indrnn[0].u == 1.5)

    def test_state_json_round_trip(self):
        net, x, y = small_problem(0)
        state = AdamState.zeros_like(net)
        adam_step(net, backward(net, x, y)[0], state, TrainConfig())
        back = AdamState.from_json(json.loads(json.dumps(state.to_json())), net)
        assert back.step == 1
        for k in state.m:
            assert back.m[k].tobytes() == state.m[k].tobytes()
            assert back.v[k].tobytes() == state.v[k].tobytes()


class TestTrain:
    def test_zero_epochs(self):
        net = init_network({"n_features": 2, "indrnn_widths": [3], "lstm_width": 3, "seed": 0})
        before = parameter_checksum(net)
        _, report, _ = train(net, toy_dataset(), TrainConfig(epochs=0))
        assert report.train_loss == [] and parameter_checksum(net) == before

    def test_determinism(self):
        def run():
            net = init_network({"n_features": 2, "indrnn_widths": [4], "lstm_width": 3, "seed": 1})
            return train(net, toy_dataset(), TrainConfig(epochs=4, batch_size=8, seed=3))[1]

        a, b = run(), run()
        assert a.train_loss == b.train_loss and a.val_loss == b.val_loss
        assert a.checksum == b.checksum
        assert a.to_csv(include_timing=False) == b.to_csv(include_timing=False)

    def test_report_layout(self):
        net = init_network({"n_features": 2, "indrnn_widths": [4], "lstm_width": 3, "seed": 1})
        _, report, state = train(net, toy_dataset(), TrainConfig(epochs=3, batch_size=16))
        lines = report.to_csv().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,seconds"
        assert len(lines) == 4 and all(len(line.split(",")) == 4 for line in lines)
        assert report.to_csv(include_timing=False).splitlines()[1].endswith(",")
        assert state.step == 3 * 3  # 36 fitting samples in batches of 16

    def test_no_validation_writes_empty_field(self):
        net = init_network({"n_features": 2, "indrnn_widths": [4], "lstm_width": 3, "seed": 1})
        _, report, _ = train(net, toy_dataset(), TrainConfig(epochs=1, validation_fraction=0.0))
        assert report.to_csv(False).splitlines()[1].split(",")[2] == ""

    def test_loss_decreases(self):
        net = init_network({"n_features": 2, "indrnn_widths": [8], "lstm_width": 8, "seed": 0})
        _, report, _ = train(net, toy_dataset(n=32), TrainConfig(epochs=60, batch_size=32,
                                                                  learning_rate=1e-2,
                                                                  validation_fraction=0.0))
        assert report.train_loss[-1] < 0.5 * report.train_loss[0]

    def test_u_bound_holds_through_training(self):
        arch = {"n_features": 2, "indrnn_widths": [5, 5], "lstm_width": 3, "seed": 0, "u_max": 0.9}
        net = init_network(arch)
        train(net, toy_dataset(), TrainConfig(epochs=5, learning_rate=0.1, batch_size=8))
        for layer in net.indrnn:
            assert np.abs(layer.u).max() <= 0.9

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_epoch(self):
        net = init_network({"n_features": 2, "indrnn_widths": [3], "lstm_width": 3, "seed": 0})
        net.head = DenseLayer(np.full((1, 3), np.inf), np.zeros(1))
        with pytest.raises(NumericError, match="epoch 1"):
            train(net, toy_dataset(), TrainConfig(epochs=2))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(validation_fraction=0.9)

    def test_empty_report_csv(self):
        assert TrainReport().to_csv() == "epoch,train_loss,val_loss,seconds\n"
