"""Tests for the numpy micro-CNN: shapes, forward pass, backprop, training and weight files."""

import json

import numpy as np
import pandas as pd
import pytest

from app.models.network import ConvBlock, NetworkConfig, TrainConfig
from app.services.cnn import (
    accuracy,
    build_network,
    forward,
    gradient_check,
    load_weights,
    loss_and_gradients,
    loss_from_probs,
    param_shapes,
    pool_backward,
    pool_forward,
    predict,
    prepare_patches,
    save_weights,
    train,
    write_loss_log,
)


def _batch(n=4, size=8, seed=0):
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, 1, size, size))


def _two_class_patches(n_per_class=20, size=8, seed=0):
    rng = np.random.default_rng(seed)
    dark = rng.uniform(0.0, 0.3, size=(n_per_class, 1, size, size))
    bright = rng.uniform(0.7, 1.0, size=(n_per_class, 1, size, size))
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    return np.concatenate([dark, bright]), labels


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

class TestConstruction:

    def test_param_shapes(self, tiny_network_config):
        assert param_shapes(tiny_network_config) == {
            "conv1.W": (3, 1, 3, 3),
            "conv1.b": (3,),
            "conv2.W": (4, 3, 3, 3),
            "conv2.b": (4,),
            "fc1.W": (6, 16),
            "fc1.b": (6,),
            "out.W": (2, 6),
            "out.b": (2,),
        }

    def test_default_architecture_size(self):
        shapes = param_shapes(NetworkConfig())
        assert shapes["fc1.W"] == (256, 64 * 4 * 4)
        assert sum(int(np.prod(s)) for s in shapes.values()) == 349538

    def test_seeded_initialization(self, tiny_network_config):
        a = build_network(tiny_network_config, seed=5)
        b = build_network(tiny_network_config, seed=5)
        c = build_network(tiny_network_config, seed=6)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        assert not np.array_equal(a.params["conv1.W"], c.params["conv1.W"])
        assert not a.params["out.b"].any()

    def test_architecture_collapses(self):
        config = NetworkConfig(input_size=8, conv_blocks=[ConvBlock(channels=2)] * 4,
                               fc_sizes=[4], dropout={})
        with pytest.raises(ValueError, match="architecture collapses"):
            build_network(config)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            ConvBlock(kernel=4, channels=2)

    def test_dropout_layer_out_of_range(self):
        with pytest.raises(ValueError):
            NetworkConfig(input_size=8, conv_blocks=[ConvBlock(channels=2)], fc_sizes=[4], dropout={3: 0.5})


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

class TestForward:

    def setup_method(self):
        self.config = NetworkConfig(
            input_size=8,
            conv_blocks=[ConvBlock(channels=3), ConvBlock(channels=4)],
            fc_sizes=[6],
            dropout={3: 0.5},
        )
        self.network = build_network(self.config, seed=1)
        self.batch = _batch(n=5)

    def test_probabilities_sum_to_one(self):
        probs = forward(self.network, self.batch)
        assert probs.shape == (5, 2)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert (probs >= 0).all()

    def test_inference_is_deterministic_and_chunk_independent(self):
        whole = forward(self.network, self.batch)
        chunked = forward(self.network, self.batch, batch_size=2)
        np.testing.assert_allclose(whole, chunked, rtol=0, atol=1e-12)

    def test_train_mode_dropout_seeded(self):
        a = forward(self.network, self.batch, mode="train", seed=3)
        b = forward(self.network, self.batch, mode="train", seed=3)
        c = forward(self.network, self.batch, mode="train", seed=4)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_train_mode_without_dropout_matches_inference(self, tiny_network_config):
        network = build_network(tiny_network_config, seed=2)
        np.testing.assert_allclose(
            forward(network, self.batch, mode="train", seed=9), forward(network, self.batch), atol=1e-12,
        )

    def test_dropout_preserves_expected_logits(self):
        # Dropout sits on the last hidden layer, so logits are linear in its mask.
        def logit_gap(probs):
            return np.log(probs[:, 1]) - np.log(probs[:, 0])

        reference = logit_gap(forward(self.network, self.batch))
        draws = np.array([logit_gap(forward(self.network, self.batch, mode="train", seed=s))
                          for s in range(4000)])
        error = np.abs(draws.mean(axis=0) - reference)
        assert np.all(error <= 4.0 * draws.std(axis=0) / np.sqrt(len(draws)) + 1e-12)

    def test_channel_axis_optional(self):
        np.testing.assert_allclose(forward(self.network, self.batch[:, 0]), forward(self.network, self.batch))

    def test_wrong_patch_size(self):
        with pytest.raises(ValueError, match="does not match network input"):
            forward(self.network, _batch(size=16))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            forward(self.network, self.batch, mode="eval")

    def test_ties_go_to_first_class(self, tiny_network_config):
        network = build_network(tiny_network_config)
        for p in network.params.values():
            p[...] = 0.0
        assert predict(network, self.batch).tolist() == [0] * 5


# ---------------------------------------------------------------------------
# Loss and backprop
# ---------------------------------------------------------------------------

class TestPooling:

    def setup_method(self):
        rng = np.random.default_rng(13)
        self.x = rng.normal(size=(2, 3, 7, 9))
        self.out, self.idx = pool_forward(self.x)

    def test_output_is_window_max(self):
        assert self.out.shape == (2, 3, 3, 4)
        windows = self.x[:, :, :6, :8].reshape(2, 3, 3, 2, 4, 2)
        np.testing.assert_array_equal(self.out, windows.max(axis=(3, 5)))

    def test_gradient_routed_to_argmax_only(self):
        dout = np.random.default_rng(14).normal(size=self.out.shape)
        dx = pool_backward(dout, self.idx, self.x.shape)
        assert dx.shape == self.x.shape
        assert not dx[:, :, 6:, :].any() and not dx[:, :, :, 8:].any()
        for i in range(3):
            for j in range(4):
                window = self.x[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                grad = dx[:, :, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
                at_max = window == window.max(axis=(2, 3), keepdims=True)
                np.testing.assert_array_equal(grad[~at_max], 0.0)
                np.testing.assert_array_equal(grad.sum(axis=(2, 3)), dout[:, :, i, j])
                assert np.all((grad != 0).sum(axis=(2, 3)) <= 1)


class TestLoss:

    def test_mse_value(self):
        probs = np.array([[0.75, 0.25], [0.5, 0.5]])
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, _ = loss_from_probs(probs, y, "mse")
        assert loss == pytest.approx((0.0625 + 0.0625 + 0.25 + 0.25) / 2)

    def test_xent_value_and_gradient(self):
        probs = np.array([[0.8, 0.2]])
        y = np.array([[0.0, 1.0]])
        loss, dlogits = loss_from_probs(probs, y, "xent")
        assert loss == pytest.approx(-np.log(0.2))
        np.testing.assert_allclose(dlogits, [[0.8, -0.8]])

    def test_unknown_loss(self):
        with pytest.raises(ValueError, match="unknown loss"):
            loss_from_probs(np.full((1, 2), 0.5), np.array([[1.0, 0.0]]), "hinge")

    def test_index_and_one_hot_labels_agree(self, tiny_network_config):
        network = build_network(tiny_network_config)
        batch = _batch()
        a, ga = loss_and_gradients(network, batch, np.array([0, 1, 1, 0]))
        b, gb = loss_and_gradients(network, batch, np.array([[1, 0], [0, 1], [0, 1], [1, 0]]))
        assert a == b
        for name in ga:
            np.testing.assert_array_equal(ga[name], gb[name])

    def test_gradients_cover_every_parameter(self, tiny_network_config):
        network = build_network(tiny_network_config)
        _, grads = loss_and_gradients(network, _batch(), np.array([0, 1, 0, 1]))
        assert list(grads) == list(network.params)
        for name, grad in grads.items():
            assert grad.shape == network.params[name].shape

    @pytest.mark.parametrize("labels", [np.array([0, 1, 2, 0]), np.array([0, 1]), np.array([[1, 1], [0, 1], [1, 0], [1, 0]])])
    def test_bad_labels(self, tiny_network_config, labels):
        network = build_network(tiny_network_config)
        with pytest.raises(ValueError):
            loss_and_gradients(network, _batch(), labels)


class TestGradientCheck:

    @pytest.mark.parametrize("loss", ["mse", "xent"])
    def test_backprop_matches_finite_differences(self, tiny_network_config, loss):
        config = tiny_network_config.model_copy(update={"loss": loss})
        network = build_network(config, seed=0)
        error, checked = gradient_check(network, _batch(), np.array([0, 1, 0, 1]), h=1e-5, n_params=200)
        assert checked == 200
        assert error < 1e-4

    def test_checks_everything_when_small(self):
        config = NetworkConfig(input_size=4, conv_blocks=[ConvBlock(channels=2)], fc_sizes=[3], dropout={})
        network = build_network(config, seed=1)
        error, checked = gradient_check(network, _batch(size=4), np.array([1, 0, 1, 0]))
        assert checked == network.n_parameters
        assert error < 1e-4

    def test_network_left_untouched(self, tiny_network_config):
        network = build_network(tiny_network_config)
        before = {k: v.copy() for k, v in network.params.items()}
        gradient_check(network, _batch(), np.array([0, 1, 0, 1]), n_params=20)
        for name, value in before.items():
            np.testing.assert_array_equal(network.params[name], value)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TestTrain:

    def setup_method(self):
        self.patches, self.labels = _two_class_patches()
        self.config = TrainConfig(batch_size=10, learning_rate=0.1, iterations=200, seed=0)

    def test_loss_decreases(self, tiny_network_config):
        network = build_network(tiny_network_config.model_copy(update={"loss": "xent"}))
        _, history = train(network, self.patches, self.labels, self.config)
        assert len(history) == 200
        assert np.mean(history[-20:]) < np.mean(history[:20])

    def test_separable_toy_reaches_full_accuracy(self, tiny_network_config):
        rng = np.random.default_rng(21)
        levels = np.concatenate([rng.uniform(0.05, 0.35, 100), rng.uniform(0.65, 0.95, 100)])
        patches = np.broadcast_to(levels[:, None, None, None], (200, 1, 8, 8)).copy()
        labels = np.array([0] * 100 + [1] * 100)
        network = build_network(tiny_network_config)
        assert network.config.loss == "mse"
        config = TrainConfig(batch_size=200, learning_rate=0.2, iterations=200, seed=0)
        trained, _ = train(network, patches, labels, config)
        assert accuracy(trained, patches, labels) >= 0.99

    def test_zero_learning_rate_freezes_weights(self, tiny_network_config):
        network = build_network(tiny_network_config)
        assert tiny_network_config.dropout == {}
        config = TrainConfig(batch_size=len(self.labels), learning_rate=0.0, iterations=12,
                             seed=0, shuffle=False)
        trained, history = train(network, self.patches, self.labels, config)
        for name, value in network.params.items():
            np.testing.assert_array_equal(trained.params[name], value)
        assert len(set(history)) == 1

    def test_seeded_training_reproducible(self, tiny_network_config):
        network = build_network(tiny_network_config)
        config = self.config.model_copy(update={"iterations": 15})
        _, a = train(network, self.patches, self.labels, config)
        _, b = train(network, self.patches, self.labels, config)
        assert a == b

    def test_input_network_untouched(self, tiny_network_config):
        network = build_network(tiny_network_config)
        before = network.params["out.W"].copy()
        train(network, self.patches, self.labels, self.config.model_copy(update={"iterations": 5}))
        np.testing.assert_array_equal(network.params["out.W"], before)

    def test_degenerate_labels(self, tiny_network_config):
        network = build_network(tiny_network_config)
        with pytest.raises(ValueError, match="degenerate labels"):
            train(network, self.patches, np.zeros(len(self.patches), dtype=int), self.config)

    def test_label_count_mismatch(self, tiny_network_config):
        network = build_network(tiny_network_config)
        with pytest.raises(ValueError):
            train(network, self.patches, self.labels[:-1], self.config)

    def test_loss_log(self, tmp_path):
        path = write_loss_log([0.5, 0.25, 0.125], tmp_path / "loss.csv")
        frame = pd.read_csv(path)
        assert frame.columns.tolist() == ["iteration", "loss"]
        assert frame["iteration"].tolist() == [1, 2, 3]
        assert frame["loss"].tolist() == [0.5, 0.25, 0.125]

    def test_prepare_patches(self):
        pixels = np.array([[[0, 255], [51, 102]]], dtype=np.uint8)
        x = prepare_patches(pixels)
        assert x.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(x[0, 0], [[0.0, 1.0], [0.2, 0.4]])


# ---------------------------------------------------------------------------
# Weight files
# ---------------------------------------------------------------------------

class TestWeights:

    def setup_method(self):
        self.config = NetworkConfig(
            input_size=8,
            conv_blocks=[ConvBlock(channels=3), ConvBlock(kernel=5, channels=4)],
            fc_sizes=[6, 5],
            dropout={3: 0.75, 4: 0.75},
            loss="xent",
        )
        self.network = build_network(self.config, seed=7)

    def test_round_trip(self, tmp_path):
        path = save_weights(self.network, tmp_path / "w" / "weights.bin")
        loaded = load_weights(path)
        assert loaded.config == self.config
        assert list(loaded.params) == list(self.network.params)
        for name, value in self.network.params.items():
            np.testing.assert_array_equal(loaded.params[name], value)
        np.testing.assert_array_equal(forward(loaded, _batch()), forward(self.network, _batch()))

    def test_header_is_json_line(self, tmp_path):
        path = save_weights(self.network, tmp_path / "weights.bin")
        header = json.loads(path.read_bytes().split(b"\n", 1)[0])
        assert header["format_version"] == 1
        assert [layer["name"] for layer in header["layers"]][:2] == ["conv1.W", "conv1.b"]
        assert header["layers"][2]["shape"] == [4, 3, 5, 5]

    def test_truncated_payload(self, tmp_path):
        path = save_weights(self.network, tmp_path / "weights.bin")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            load_weights(path)

    def test_trailing_bytes(self, tmp_path):
        path = save_weights(self.network, tmp_path / "weights.bin")
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(ValueError, match="trailing bytes"):
            load_weights(path)

    def test_shape_mismatch(self, tmp_path):
        path = save_weights(self.network, tmp_path / "weights.bin")
        head, payload = path.read_bytes().split(b"\n", 1)
        header = json.loads(head)
        header["layers"][0]["shape"] = [3, 1, 5, 5]
        path.write_bytes(json.dumps(header).encode() + b"\n" + payload)
        with pytest.raises(ValueError, match="has shape"):
            load_weights(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "weights.bin"
        path.write_bytes(b"\x00" * 16)
        with pytest.raises(ValueError, match="missing header"):
            load_weights(path)

    def test_unsupported_version(self, tmp_path):
        path = save_weights(self.network, tmp_path / "weights.bin")
        head, payload = path.read_bytes().split(b"\n", 1)
        header = json.loads(head)
        header["format_version"] = 99
        path.write_bytes(json.dumps(header).encode() + b"\n" + payload)
        with pytest.raises(ValueError, match="format_version"):
            load_weights(path)
