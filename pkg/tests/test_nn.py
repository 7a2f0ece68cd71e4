import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from transmia.errors import ParseError, RejectedInputError, VersionError
from transmia.nn import (BLOB_VERSION, PROB_EPS, DenseLayer, LayeredNet, TrainConfig, accuracy,
                         cross_entropy, forward, gradient_check, gradients, init_net, load_params,
                         mean_loss, predict, save_params, train, transform)

from conftest import make_dataset

net_shapes = st.lists(st.integers(1, 6), min_size=2, max_size=5)


def random_net(dims, seed, activation="relu", scale=1.0):
    gen = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        act = activation if i < len(dims) - 2 else "identity"
        layers.append(DenseLayer(scale * gen.standard_normal((dims[i + 1], dims[i])),
                                 gen.standard_normal(dims[i + 1]), act))
    return LayeredNet(tuple(layers))


class TestForward:
    def test_zero_net_is_uniform(self):
        net = LayeredNet((DenseLayer(np.zeros((3, 4)), np.zeros(3)),
                          DenseLayer(np.zeros((5, 3)), np.zeros(5))))
        v = forward(net, np.array([1.0, -2.0, 3.0, 0.5]))
        assert np.array_equal(v, np.full(5, 0.2))

    def test_hand_softmax(self):
        net = LayeredNet((DenseLayer(np.zeros((2, 1)), np.array([0.0, math.log(3.0)])),))
        v = forward(net, np.array([1.0]))
        assert v == pytest.approx([0.25, 0.75], abs=1e-15)

    @given(dims=net_shapes, seed=st.integers(0, 2**32 - 1),
           scale=st.sampled_from([0.1, 1.0, 30.0]),
           activation=st.sampled_from(["relu", "tanh", "identity"]))
    def test_output_is_a_distribution(self, dims, seed, scale, activation):
        net = random_net(dims, seed, activation, scale)
        X = np.random.default_rng(seed).normal(0, 5, (7, dims[0]))
        V = forward(net, X)
        assert np.all(V >= 0) and np.all(V <= 1)
        assert np.all(np.abs(V.sum(axis=1) - 1) <= 1e-9)

    def test_batch_matches_single_rows(self):
        net = random_net([3, 4, 2], 1)
        X = np.random.default_rng(0).normal(size=(5, 3))
        batch = forward(net, X)
        for i in range(5):
            np.testing.assert_allclose(forward(net, X[i]), batch[i], rtol=1e-12)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(RejectedInputError):
            forward(random_net([3, 2], 0), np.ones(4))

    def test_argmax_ties_go_to_lowest_index(self):
        net = LayeredNet((DenseLayer(np.zeros((3, 2)), np.zeros(3)),))
        assert predict(net, np.ones((2, 2))).tolist() == [0, 0]

    def test_layers_must_chain(self):
        with pytest.raises(RejectedInputError):
            LayeredNet((DenseLayer(np.zeros((3, 2)), np.zeros(3)),
                        DenseLayer(np.zeros((2, 4)), np.zeros(2))))

    def test_default_split_is_before_last_layer(self):
        assert init_net([4, 5, 6, 3]).split_index == 2
        assert init_net([4, 3]).split_index == 0


class TestCrossEntropy:
    def test_one_hot_is_zero(self):
        assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0

    def test_half_half(self):
        assert cross_entropy(np.array([0.5, 0.5]), 0) == pytest.approx(math.log(2), abs=1e-12)

    def test_zero_probability_saturates(self):
        assert cross_entropy(np.array([0.0, 1.0]), 0) == pytest.approx(-math.log(PROB_EPS))

    @pytest.mark.parametrize("label", [-1, 2])
    def test_label_out_of_range(self, label):
        with pytest.raises(RejectedInputError):
            cross_entropy(np.array([0.5, 0.5]), label)

    def test_batch_form(self):
        V = np.array([[0.25, 0.75], [0.5, 0.5]])
        np.testing.assert_allclose(cross_entropy(V, np.array([1, 0])),
                                   [-math.log(0.75), math.log(2)])


class TestGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_central_differences(self, seed):
        gen = np.random.default_rng(seed)
        dims = [int(d) for d in gen.integers(2, 6, size=gen.integers(2, 5))]
        act = ["relu", "tanh", "identity"][seed % 3]
        glorot = init_net(dims, act, seed=seed)
        net = LayeredNet(tuple(DenseLayer(l.weights, 0.1 * gen.normal(size=l.out_dim), l.activation)
                               for l in glorot.layers))
        x = gen.normal(size=dims[0])
        y = int(gen.integers(dims[-1]))
        assert gradient_check(net, (x, y)) < 1e-4

    def test_spec_shape_4_6_3(self):
        net = init_net([4, 6, 3], "tanh", seed=11)
        x = np.random.default_rng(11).normal(size=4)
        assert gradient_check(net, (x, 2)) < 1e-4

    def test_zero_net_has_no_nan(self):
        net = LayeredNet((DenseLayer(np.zeros((4, 3)), np.zeros(4), "relu"),
                          DenseLayer(np.zeros((2, 4)), np.zeros(2))))
        err = gradient_check(net, (np.array([1.0, 2.0, 3.0]), 1))
        assert not math.isnan(err)
        assert err < 1e-4

    def test_single_linear_layer_closed_form(self):
        gen = np.random.default_rng(5)
        net = LayeredNet((DenseLayer(gen.normal(size=(3, 4)), gen.normal(size=3)),))
        x = gen.normal(size=4)
        v = forward(net, x)
        onehot = np.eye(3)[1]
        (gw, gb), = gradients(net, x, 1)
        np.testing.assert_allclose(gw, np.outer(v - onehot, x), atol=1e-6)
        np.testing.assert_allclose(gb, v - onehot, atol=1e-6)


class TestTrain:
    def test_zero_epochs_returns_input(self, two_blobs):
        net = init_net([2, 8, 2], seed=1)
        out = train(net, two_blobs, TrainConfig(epochs=0))
        assert out.same_params(net)

    def test_all_frozen_returns_input(self, two_blobs):
        net = init_net([2, 8, 2], seed=1)
        out = train(net, two_blobs, TrainConfig(epochs=10), mask=[False, False])
        assert out.same_params(net)

    def test_frozen_layers_are_bit_identical(self, two_blobs):
        net = init_net([2, 8, 8, 2], seed=1)
        out = train(net, two_blobs, TrainConfig(epochs=3), mask=[True, False, True])
        assert out.layers[1].same_params(net.layers[1])
        assert not out.layers[0].same_params(net.layers[0])
        assert not out.layers[2].same_params(net.layers[2])

    def test_separable_blobs_fit(self, two_blobs):
        net = train(init_net([2, 8, 2], seed=0), two_blobs, TrainConfig(epochs=50))
        assert accuracy(net, two_blobs) >= 0.95
        assert math.isfinite(mean_loss(net, two_blobs))

    def test_logistic_oracle_agrees(self, two_blobs):
        # Closed-form oracle: the Bayes rule for these symmetric blobs is x1 + x2 > 0.
        oracle = (two_blobs.X.sum(axis=1) > 0).astype(int)
        net = train(init_net([2, 8, 2], seed=0), two_blobs, TrainConfig(epochs=50))
        assert np.mean(predict(net, two_blobs.X) == oracle) >= 0.95

    def test_deterministic_for_a_seed(self, two_blobs):
        cfg = TrainConfig(epochs=5, seed=9)
        a = train(init_net([2, 8, 2], seed=0), two_blobs, cfg)
        b = train(init_net([2, 8, 2], seed=0), two_blobs, cfg)
        assert a.same_params(b)
        c = train(init_net([2, 8, 2], seed=0), two_blobs, cfg.with_seed(10))
        assert not a.same_params(c)

    def test_input_net_untouched(self, two_blobs):
        net = init_net([2, 8, 2], seed=0)
        blob = save_params(net)
        train(net, two_blobs, TrainConfig(epochs=3))
        assert save_params(net) == blob

    def test_zero_learning_rate_changes_nothing(self, two_blobs):
        net = init_net([2, 8, 2], seed=0)
        out = train(net, two_blobs, TrainConfig(epochs=3, learning_rate=0.0))
        assert out.same_params(net)

    def test_batch_larger_than_data_is_clamped(self, two_blobs):
        net = train(init_net([2, 8, 2], seed=0), two_blobs, TrainConfig(epochs=2, batch_size=10_000))
        assert math.isfinite(mean_loss(net, two_blobs))

    def test_empty_dataset_rejected(self):
        empty = make_dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), num_classes=2)
        with pytest.raises(RejectedInputError):
            train(init_net([2, 2]), empty, TrainConfig(epochs=1))

    def test_labels_outside_outputs_rejected(self, two_blobs):
        with pytest.raises(RejectedInputError):
            train(init_net([2, 1]), two_blobs, TrainConfig(epochs=1))

    def test_mask_length_checked(self, two_blobs):
        with pytest.raises(RejectedInputError):
            train(init_net([2, 4, 2]), two_blobs, TrainConfig(epochs=1), mask=[True])

    def test_best_epoch_selection_is_at_least_final(self, small_synth):
        cfg = TrainConfig(epochs=15, batch_size=16, learning_rate=0.01)
        held = small_synth.subset(np.arange(0, 240, 2))
        fit = small_synth.subset(np.arange(1, 240, 2))
        last = train(init_net([6, 16, 4], seed=2), fit, cfg)
        best = train(init_net([6, 16, 4], seed=2), fit, cfg, select_on=held)
        assert accuracy(best, held) >= accuracy(last, held)

    def test_parameters_stay_finite(self, small_synth):
        net = train(init_net([6, 16, 4], seed=2), small_synth,
                    TrainConfig(epochs=20, learning_rate=0.01))
        assert all(np.all(np.isfinite(l.weights)) and np.all(np.isfinite(l.biases))
                   for l in net.layers)

    @pytest.mark.parametrize("kwargs", [dict(epochs=-1), dict(batch_size=0),
                                        dict(momentum=1.0), dict(weight_decay=-0.1),
                                        dict(learning_rate=math.inf)])
    def test_config_validation(self, kwargs):
        with pytest.raises(RejectedInputError):
            TrainConfig(**kwargs)


class TestBlob:
    @given(dims=net_shapes, seed=st.integers(0, 2**32 - 1), data=st.data())
    def test_round_trip_is_bitwise(self, dims, seed, data):
        split = data.draw(st.integers(0, len(dims) - 1))
        net = LayeredNet(random_net(dims, seed, "tanh").layers, split)
        back = load_params(save_params(net))
        assert back.same_params(net)
        assert back.split_index == split
        assert [l.activation for l in back.layers] == [l.activation for l in net.layers]

    def test_layout(self):
        net = LayeredNet((DenseLayer(np.array([[1.0, 2.0]]), np.array([3.0]), "relu"),), 1)
        blob = save_params(net)
        assert blob[:4] == b"TMIA"
        assert struct.unpack("<II", blob[4:12]) == (BLOB_VERSION, 1)
        assert struct.unpack("<IIB", blob[12:21]) == (2, 1, 0)
        assert np.frombuffer(blob[21:45], "<f8").tolist() == [1.0, 2.0, 3.0]
        assert struct.unpack("<I", blob[45:]) == (1,)

    def test_truncated_by_one_byte(self):
        blob = save_params(init_net([3, 4, 2], seed=0))
        with pytest.raises(ParseError):
            load_params(blob[:-1])

    @pytest.mark.parametrize("cut", [0, 3, 11, 20, 40])
    def test_truncated_anywhere(self, cut):
        blob = save_params(init_net([3, 4, 2], seed=0))
        with pytest.raises(ParseError):
            load_params(blob[:cut])

    def test_unknown_version(self):
        blob = bytearray(save_params(init_net([3, 2], seed=0)))
        blob[4:8] = struct.pack("<I", BLOB_VERSION + 1)
        with pytest.raises(VersionError):
            load_params(bytes(blob))

    def test_bad_magic_and_trailing_bytes(self):
        blob = save_params(init_net([3, 2], seed=0))
        with pytest.raises(ParseError):
            load_params(b"XXXX" + blob[4:])
        with pytest.raises(ParseError):
            load_params(blob + b"\0")

    def test_transform_skips_softmax(self):
        net = init_net([3, 2], seed=0)
        x = np.ones(3)
        z = transform(net, x)
        assert np.allclose(forward(net, x), np.exp(z) / np.exp(z).sum())
