import numpy as np
import pytest
from scenekit.static.constants import ModelKind
from scenekit.neural import (
    Adam,
    BatchNorm,
    Bidirectional,
    CacheError,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    Gru,
    MaxPool2D,
    Mode,
    NetSpec,
    NetworkFormatError,
    ReLU,
    Sgd,
    ShapeError,
    Softmax,
    TrainConfig,
    backward,
    build_architecture,
    count_params,
    cross_entropy,
    decode_network,
    encode_network,
    examples_for,
    forward,
    gru_sequence,
    init_params,
    input_shape_for,
    load_network,
    make_optimizer,
    predict_proba,
    save_network,
    segment_sequence,
    train,
)
from scenekit.neural.gru import gru_cell
from scenekit.neural.net import numeric_gradient, relative_error
from scenekit.neural.optim import penalty, penalty_grads

GRADIENT_NETWORKS = {
    "dense": ((5,), (Dense(4), ReLU(), Dense(6), Softmax(3))),
    "softmax": ((7,), (Softmax(4),)),
    "batchnorm": ((5,), (Dense(6), BatchNorm(), ReLU(), Softmax(3))),
    "dropout_off": ((5,), (Dense(6), Dropout(0.0), Softmax(3))),
    "dropout_on": ((5,), (Dense(6), Dropout(0.3), Softmax(3))),
    "conv": ((1, 4, 5), (Conv2D(2), BatchNorm(), ReLU(), Flatten(), Softmax(3))),
    "maxpool": ((2, 4, 4), (Conv2D(2), MaxPool2D(), Flatten(), Softmax(3))),
    "gru": ((3, 2), (Gru(4), Softmax(3))),
    "gru_sequences": ((3, 2), (Gru(3, return_sequences=True), Flatten(), Softmax(2))),
    "bidirectional": ((3, 2), (Bidirectional(3), Softmax(3))),
}


def perturb(params, rng):
    """Random biases and batch-norm scales so no gradient is trivially symmetric."""
    for tensors in params:
        for name in ("b", "beta", "fw_b", "bw_b"):
            if name in tensors:
                tensors[name][...] = rng.normal(0, 0.3, tensors[name].shape)
        if "gamma" in tensors:
            tensors["gamma"][...] = rng.uniform(0.5, 1.5, tensors["gamma"].shape)


def assert_gradient_close(analytic, numeric):
    if np.allclose(analytic, 0, atol=1e-9) and np.allclose(numeric, 0, atol=1e-9):
        return
    assert relative_error(analytic, numeric) < 1e-4


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("network", sorted(GRADIENT_NETWORKS))
    def test_backward_matches_central_differences(self, network, seed):
        input_shape, layers = GRADIENT_NETWORKS[network]
        spec = NetSpec(input_shape=input_shape, layers=layers)
        rng = np.random.default_rng(seed)
        params = init_params(spec, seed, dtype=np.float64)
        perturb(params, rng)

        batch = rng.standard_normal((4,) + spec.input_shape)
        labels = rng.integers(0, spec.classes, 4)

        def loss():
            probs, _ = forward(spec, params, batch, Mode.train, seed=seed)
            return cross_entropy(probs, labels)[0]

        probs, cache = forward(spec, params, batch, Mode.train, seed=seed)
        _, grad = cross_entropy(probs, labels)
        grads = backward(spec, params, cache, grad)

        for index, layer in enumerate(spec.layers):
            for name in layer.trainable:
                numeric = numeric_gradient(loss, params[index][name])
                assert_gradient_close(grads[index][name], numeric)

    def test_cross_entropy_gradient_is_probs_minus_onehot(self):
        probs = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
        loss, grad = cross_entropy(probs, np.array([0, 2]))
        assert loss == pytest.approx(-(np.log(0.7) + np.log(0.8)) / 2)
        np.testing.assert_allclose(grad, [[-0.15, 0.1, 0.05], [0.05, 0.05, -0.1]])


class TestSpec:
    def test_must_end_with_softmax(self):
        with pytest.raises(ShapeError):
            NetSpec(input_shape=(10,), layers=(Dense(4), ReLU()))

    def test_softmax_only_last(self):
        with pytest.raises(ShapeError) as info:
            NetSpec(input_shape=(10,), layers=(Softmax(4), Softmax(3)))
        assert info.value.layer_index == 0

    def test_dense_rejects_sequences(self):
        with pytest.raises(ShapeError) as info:
            NetSpec(input_shape=(3, 4), layers=(Dense(4), Softmax(2)))
        assert info.value.layer_index == 0

    def test_pooling_a_single_row_fails(self):
        with pytest.raises(ShapeError) as info:
            NetSpec(input_shape=(1, 1, 8), layers=(Conv2D(2), MaxPool2D(), Flatten(), Softmax(2)))
        assert info.value.layer_index == 1

    def test_shapes_and_parameter_count(self):
        spec = NetSpec(input_shape=(10,), layers=(Dense(4), BatchNorm(), ReLU(), Softmax(3)))
        assert spec.shapes == [(10,), (4,), (4,), (4,), (3,)]
        assert count_params(spec) == 44 + 8 + 15

    def test_dropout_rate_is_bounded(self):
        with pytest.raises(ValueError):
            Dropout(0.6)


class TestForward:
    @pytest.fixture
    def spec(self):
        layers = (Dense(8), BatchNorm(), ReLU(), Dropout(0.5), Softmax(3))
        return NetSpec(input_shape=(6,), layers=layers)

    def test_wrong_batch_shape(self, spec):
        params = init_params(spec, 0)
        with pytest.raises(ShapeError):
            forward(spec, params, np.zeros((2, 5)))

    def test_train_mode_needs_seed(self, spec):
        params = init_params(spec, 0)
        with pytest.raises(ValueError):
            forward(spec, params, np.zeros((2, 6)), Mode.train)

    def test_inference_is_deterministic_and_normalized(self, spec, rng):
        params = init_params(spec, 0)
        batch = rng.standard_normal((5, 6)).astype(np.float32)
        first, _ = forward(spec, params, batch)
        second, _ = forward(spec, params, batch, "infer")
        np.testing.assert_array_equal(first, second)
        np.testing.assert_allclose(first.sum(axis=1), 1.0, rtol=1e-5)

    def test_train_masks_follow_seed(self, spec, rng):
        params = init_params(spec, 0)
        batch = rng.standard_normal((5, 6)).astype(np.float32)
        a, _ = forward(spec, params, batch, Mode.train, seed=4)
        b, _ = forward(spec, params, batch, Mode.train, seed=4)
        c, _ = forward(spec, params, batch, Mode.train, seed=5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_cache_is_single_use(self, spec, rng):
        params = init_params(spec, 0)
        batch = rng.standard_normal((4, 6)).astype(np.float32)
        probs, cache = forward(spec, params, batch, Mode.train, seed=0)
        _, grad = cross_entropy(probs, np.array([0, 1, 2, 0]))
        backward(spec, params, cache, grad)
        with pytest.raises(CacheError):
            backward(spec, params, cache, grad)

    def test_cache_from_other_network(self, spec, rng):
        other = NetSpec(input_shape=(6,), layers=(Dense(8), Softmax(3)))
        params = init_params(other, 0)
        probs, cache = forward(other, params, np.zeros((2, 6), np.float32), Mode.train, seed=0)
        with pytest.raises(CacheError):
            backward(spec, init_params(spec, 0), cache, probs)

    def test_predict_proba_batches(self, spec, rng):
        params = init_params(spec, 0)
        examples = rng.standard_normal((7, 6)).astype(np.float32)
        whole, _ = forward(spec, params, examples)
        np.testing.assert_allclose(predict_proba(spec, params, examples, 3), whole, rtol=1e-5)
        assert predict_proba(spec, params, examples[:0]).shape == (0, 3)

    def test_zero_gru_stays_silent(self):
        params = dict(W=np.zeros((4, 9)), U=np.zeros((3, 9)), b=np.zeros(9))
        states, _ = gru_sequence(np.ones((2, 5, 4)), params)
        assert states.shape == (2, 5, 3)
        np.testing.assert_array_equal(states, 0.0)

    def test_zero_gru_halves_its_state(self, rng):
        params = dict(W=np.zeros((4, 9)), U=np.zeros((3, 9)), b=np.zeros(9))
        h_prev = rng.standard_normal((2, 3))
        h, _ = gru_cell(rng.standard_normal((2, 4)), h_prev, params)
        np.testing.assert_allclose(h, 0.5 * h_prev)

    def test_zero_dropout_matches_inference(self, rng):
        spec = NetSpec(input_shape=(6,), layers=(Dense(8), ReLU(), Dropout(0.0), Softmax(3)))
        params = init_params(spec, 0)
        batch = rng.standard_normal((5, 6)).astype(np.float32)
        trained, _ = forward(spec, params, batch, Mode.train, seed=3)
        inferred, _ = forward(spec, params, batch, Mode.infer)
        np.testing.assert_array_equal(trained, inferred)

    def test_zero_input_is_uniform(self):
        spec = NetSpec(input_shape=(10,), layers=(Dense(8), ReLU(), Softmax(15)))
        probs, _ = forward(spec, init_params(spec, 0), np.zeros((3, 10), np.float32))
        np.testing.assert_allclose(probs, 1 / 15, rtol=1e-6)

    def test_conv_then_pool_halves_the_patch(self, rng):
        conv, pool = Conv2D(4), MaxPool2D()
        params = conv.init_params((1, 60, 100), rng, relu_follows=True)
        maps, _ = conv.forward(params, rng.standard_normal((2, 1, 60, 100)), False, None)
        pooled, _ = pool.forward({}, maps, False, None)
        assert maps.shape == (2, 4, 60, 100)
        assert pooled.shape == (2, 4, 30, 50)
        assert pool.output_shape(conv.output_shape((1, 60, 100))) == (4, 30, 50)

    def test_linear_layer_squared_error_gradient(self, rng):
        dense = Dense(3)
        params = dict(W=rng.standard_normal((4, 3)), b=np.zeros(3))
        x, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))

        out, cache = dense.forward(params, x, True, None)
        _, grads = dense.backward(params, cache, 2 * (out - y))
        expected = 2 * x.T @ (x @ params["W"] - y)
        np.testing.assert_allclose(grads["W"], expected, rtol=1e-12)

        numeric = numeric_gradient(lambda: np.sum(np.square(x @ params["W"] - y)), params["W"])
        assert relative_error(grads["W"], numeric) < 1e-7


class TestOptimizers:
    def test_plain_sgd_step(self):
        params = [dict(W=np.array([1.0, -2.0]))]
        Sgd(lr=0.1, momentum=0.0).step(params, [dict(W=np.array([0.5, 1.0]))])
        np.testing.assert_allclose(params[0]["W"], [0.95, -2.1])

    def test_momentum_accumulates(self):
        params = [dict(W=np.array([0.0]))]
        optimizer = Sgd(lr=1.0, momentum=0.5)
        for _ in range(2):
            optimizer.step(params, [dict(W=np.array([1.0]))])
        np.testing.assert_allclose(params[0]["W"], [-2.5])

    def test_first_adam_step_is_learning_rate_sized(self):
        params = [dict(W=np.array([0.0, 0.0]))]
        Adam(lr=0.01).step(params, [dict(W=np.array([3.0, -0.2]))])
        np.testing.assert_allclose(params[0]["W"], [-0.01, 0.01], rtol=1e-5)

    def test_zero_rate_adam_stands_still(self):
        params = [dict(W=np.array([1.5, -2.0]))]
        optimizer = Adam(lr=0.0)
        for _ in range(3):
            optimizer.step(params, [dict(W=np.array([3.0, -0.2]))])
        np.testing.assert_array_equal(params[0]["W"], [1.5, -2.0])

    @pytest.mark.parametrize(
        "kind, lr", [("sgd", 0.05), ("adam", 0.05), ("rmsprop", 0.05), ("adagrad", 1.0)]
    )
    def test_every_optimizer_descends_a_quadratic(self, kind, lr):
        params = [dict(W=np.array([3.0, -4.0]))]
        optimizer = make_optimizer(kind, lr=lr)
        for _ in range(200):
            optimizer.step(params, [dict(W=2 * params[0]["W"])])
        assert np.linalg.norm(params[0]["W"]) < 1.0

    def test_default_rates(self):
        assert make_optimizer("adam").lr == pytest.approx(1e-3)
        assert make_optimizer("sgd").lr == pytest.approx(1e-2)

    def test_penalty_skips_biases(self):
        layers = (Dense(2), Softmax(2))
        params = [
            dict(W=np.array([[1.0, 2.0]]), b=np.array([10.0, 10.0])),
            dict(W=np.array([[1.0, 0.0], [0.0, -1.0]]), b=np.zeros(2)),
        ]
        assert penalty(layers, params, "l2", 0.5) == pytest.approx(0.5 * (5.0 + 2.0))
        assert penalty(layers, params, "l1", 0.1) == pytest.approx(0.1 * (3.0 + 2.0))
        assert penalty(layers, params, "none", 1.0) == 0.0

        grads = penalty_grads(layers, params, "l2", 0.5)
        np.testing.assert_allclose(grads[0]["W"], [[1.0, 2.0]])
        assert "b" not in grads[0]


def blobs(rng, count=100, dim=5, classes=3):
    labels = np.repeat(np.arange(classes), count)
    examples = 4.0 * np.eye(dim)[labels] + rng.standard_normal((len(labels), dim))
    return examples.astype(np.float32), labels


class TestTraining:
    @pytest.fixture
    def spec(self):
        return build_architecture(
            "dnn", (5,), classes=3, dense_units=16, dense_layers=1, dense_dropout=0.1
        )

    @pytest.fixture
    def cfg(self):
        return TrainConfig(lr=1e-2, batch_size=32, epochs=30, patience=0, seed=1)

    def test_learns_separable_blobs(self, spec, cfg, rng):
        dataset = blobs(rng)
        params, history = train(spec, init_params(spec, 0), dataset, cfg)

        probs = predict_proba(spec, params, dataset[0])
        assert np.mean(np.argmax(probs, axis=1) == dataset[1]) > 0.9
        assert history.losses[-1] < history.losses[0]
        assert history.best_epoch == cfg.epochs

    def test_same_seed_same_parameters(self, spec, cfg, rng):
        dataset = blobs(rng)
        first, _ = train(spec, init_params(spec, 0), dataset, cfg)
        second, _ = train(spec, init_params(spec, 0), dataset, cfg)
        for a, b in zip(first, second):
            for name in a:
                np.testing.assert_array_equal(a[name], b[name])

    def test_input_parameters_are_untouched(self, spec, cfg, rng):
        start = init_params(spec, 0)
        before = [{name: array.copy() for name, array in tensors.items()} for tensors in start]
        train(spec, start, blobs(rng), cfg)
        for a, b in zip(start, before):
            for name in a:
                np.testing.assert_array_equal(a[name], b[name])

    def test_early_stopping_keeps_best_epoch(self, spec, rng):
        cfg = TrainConfig(lr=1e-2, batch_size=32, epochs=40, patience=3, seed=2)
        _, history = train(spec, init_params(spec, 0), blobs(rng), cfg, validation=blobs(rng, 20))
        assert history.best_epoch is not None
        assert max(history.val_accuracies) == history.val_accuracies[history.best_epoch - 1]
        assert history.to_csv().splitlines()[0] == "epoch,loss,val_acc"

    def test_empty_dataset(self, spec, cfg):
        with pytest.raises(ValueError):
            train(spec, init_params(spec, 0), (np.zeros((0, 5)), np.zeros(0)), cfg)

    def test_zero_learning_rate_leaves_parameters(self, rng):
        spec = NetSpec(input_shape=(5,), layers=(Dense(8), ReLU(), Softmax(3)))
        start = init_params(spec, 0)
        cfg = TrainConfig(optimizer="adam", lr=0.0, batch_size=16, epochs=3, patience=0)
        params, _ = train(spec, start, blobs(rng, 20), cfg)
        for a, b in zip(params, start):
            for name in a:
                np.testing.assert_array_equal(a[name], b[name])

    def test_logistic_regression_separates_two_blobs(self, rng):
        labels = np.repeat([0, 1], 100)
        examples = np.where(labels[:, None] == 0, -3.0, 3.0) + rng.normal(0, 0.5, (200, 2))
        spec = NetSpec(input_shape=(2,), layers=(Softmax(2),))
        cfg = TrainConfig(lr=0.05, batch_size=32, epochs=200, patience=0, seed=0)
        params, _ = train(spec, init_params(spec, 0), (examples.astype(np.float32), labels), cfg)

        predicted = np.argmax(predict_proba(spec, params, examples.astype(np.float32)), axis=1)
        assert np.mean(predicted == labels) >= 0.99

    def test_config_validation_and_snapshot(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=-1.0)

        cfg = TrainConfig(optimizer="sgd", epochs=7, seed=9, regularizer="l2", coefficient=1e-4)
        restored = TrainConfig.from_snapshot(cfg.to_snapshot())
        assert restored.optimizer == cfg.optimizer
        assert restored.learning_rate == pytest.approx(cfg.learning_rate)
        assert (restored.epochs, restored.seed) == (7, 9)
        assert restored.regularizer == cfg.regularizer
        assert restored.coefficient == pytest.approx(1e-4)


class TestArchitectures:
    def test_dnn_blocks(self):
        spec = build_architecture("dnn", (60,))
        assert len(spec.layers) == 4 * 4 + 1
        assert spec.classes == 15
        assert spec.shapes[-1] == (15,)

    def test_rnn_pair_and_stack(self):
        pair = build_architecture(ModelKind.rnn, (100, 61), rnn_units=8)
        stacked = build_architecture(ModelKind.rnn, (100, 61), rnn_units=8, rnn_stacked=True)
        assert sum(isinstance(layer, Bidirectional) for layer in pair.layers) == 1
        assert sum(isinstance(layer, Bidirectional) for layer in stacked.layers) == 2
        assert pair.shapes[1] == (16,)

    def test_cnn_on_log_mel_patches(self):
        spec = build_architecture("cnn", (60, 100))
        assert spec.input_shape == (1, 60, 100)
        outputs = zip(spec.layers, spec.shapes[1:])
        flat = [shape for layer, shape in outputs if isinstance(layer, Flatten)]
        assert flat == [(128 * 7 * 12,)]

    def test_statistical_models_are_not_networks(self):
        with pytest.raises(ValueError):
            build_architecture("gmm", (61,))

    def test_wrong_input_rank(self):
        with pytest.raises(ShapeError):
            build_architecture("dnn", (100, 61))

    def test_segments(self):
        frames = np.arange(250 * 2, dtype=float).reshape(250, 2)
        assert segment_sequence(frames).shape == (2, 100, 2)

        short = segment_sequence(frames[:30])
        assert short.shape == (1, 100, 2)
        np.testing.assert_array_equal(short[0, 30:], np.tile(frames[29], (70, 1)))

    def test_examples_match_input_shapes(self, rng):
        frames = rng.standard_normal((230, 60))
        for kind in ModelKind.dnn, ModelKind.rnn, ModelKind.cnn:
            examples = examples_for(kind, frames)
            assert examples.shape[1:] == input_shape_for(kind, 60)
        assert len(examples_for("cnn", frames)) == 2


class TestNetworkFile:
    @pytest.fixture
    def network(self):
        spec = NetSpec(
            input_shape=(1, 4, 6),
            layers=(
                Conv2D(2),
                BatchNorm(),
                ReLU(),
                MaxPool2D(),
                Dropout(0.2),
                Flatten(),
                Softmax(3),
            ),
        )
        return spec, init_params(spec, 3), TrainConfig(seed=3).to_snapshot()

    def test_round_trip(self, network, tmp_path):
        spec, params, snapshot = network
        save_network(tmp_path / "net.skn", spec, params, snapshot)
        loaded_spec, loaded_params, loaded_snapshot = load_network(tmp_path / "net.skn")

        assert loaded_spec == spec
        assert loaded_snapshot.Seed == 3
        for a, b in zip(params, loaded_params):
            assert a.keys() == b.keys()
            for name in a:
                np.testing.assert_array_equal(a[name], b[name])
        assert encode_network(loaded_spec, loaded_params, loaded_snapshot) == encode_network(
            spec, params, snapshot
        )

    def test_recurrent_round_trip(self):
        spec = build_architecture("rnn", (10, 4), classes=3, rnn_units=2, rnn_stacked=True)
        params = init_params(spec, 0)
        decoded_spec, _, _ = decode_network(
            encode_network(spec, params, TrainConfig().to_snapshot())
        )
        assert decoded_spec == spec

    def test_garbage(self):
        with pytest.raises(NetworkFormatError):
            decode_network(b"not a network")
