import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellfl import nn
from cellfl.errors import ConfigurationError, NumericDivergence, UsageError
from cellfl.nn import (
    Batch,
    Conv2d,
    Dense,
    FlatModel,
    ModelSpec,
    evaluate_accuracy,
    forward_loss,
    gradients,
    init_model,
    lenet5,
    mlp,
    sgd_step,
    train_local,
    zeros_model,
)
from oracles import (
    fd_instance,
    finite_difference,
    random_spec,
    relative_error,
    scalar_forward,
    scalar_loss,
)


class TestModelSpec:
    def test_counts(self):
        spec = mlp(4, (6,), 3)
        assert spec.weight_count == 4 * 6 + 6 * 3
        assert spec.bias_count == 6 + 3
        assert spec.num_classes == 3

    def test_lenet_matches_classic_size(self):
        spec = lenet5()
        assert spec.weight_count == 61_770
        assert spec.bias_count == 236
        assert spec.weight_count + spec.bias_count == 62_006
        assert spec.layers[1].out_shape == (16, 5, 5)

    def test_inconsistent_dims_rejected(self):
        with pytest.raises(ConfigurationError, match="layer 0 outputs 5"):
            ModelSpec((Dense(3, 5), Dense(4, 2, "identity")))

    def test_conv_to_dense_flattens(self):
        spec = ModelSpec((Conv2d(1, 2, 3, 5, 5), Dense(18, 2, "identity")))
        assert spec.input_shape == (1, 5, 5)

    def test_roundtrip_dicts(self):
        spec = lenet5(num_classes=4)
        assert ModelSpec.from_dicts(spec.to_dict()) == spec

    def test_bad_activation(self):
        with pytest.raises(ConfigurationError):
            ModelSpec((Dense(3, 2, "tanh"),))


class TestForwardLoss:
    def test_zero_model_is_uniform(self):
        spec = mlp(7, (5,), 10)
        x = np.random.default_rng(1).standard_normal((9, 7))
        loss, logits = forward_loss(zeros_model(spec), Batch(x, np.arange(9) % 10))
        assert loss == pytest.approx(math.log(10), abs=1e-12)
        assert np.all(logits == 0)

    def test_dominant_true_class_drives_loss_to_zero(self):
        spec = ModelSpec((Dense(2, 3, "identity"),))
        w = np.zeros(6)
        w[2 * 1 + 0] = 1e4  # class 1 reads feature 0
        model = FlatModel(spec, w, np.zeros(3))
        loss, _ = forward_loss(model, Batch([[1.0, 0.0]], [1]))
        assert 0.0 <= loss < 1e-12

    def test_matches_hand_computed_pass(self):
        rng = np.random.default_rng(2024)
        spec = mlp(5, (4, 3), 3)
        m = init_model(spec, rng)
        m = FlatModel(spec, m.weights, rng.uniform(-0.1, 0.1, spec.bias_count))
        x = rng.standard_normal((4, 5))
        y = np.array([0, 2, 1, 2])
        loss, logits = forward_loss(m, Batch(x, y))
        # frozen from the scalar oracle on these exact weights
        assert loss == pytest.approx(1.078345580274037, abs=1e-12)
        assert loss == pytest.approx(scalar_loss(m, x, y), abs=1e-12)
        for i in range(4):
            np.testing.assert_allclose(logits[i], scalar_forward(m, x[i].tolist()), atol=1e-12)

    def test_conv_forward_matches_scalar(self):
        rng = np.random.default_rng(3)
        spec = ModelSpec((Conv2d(2, 3, 3, 6, 6, "relu", pool=2), Dense(12, 4, "identity")))
        m = init_model(spec, rng)
        m = FlatModel(spec, m.weights, rng.uniform(-0.2, 0.2, spec.bias_count))
        x = rng.standard_normal((3, 2, 6, 6))
        _, logits = forward_loss(m, Batch(x, [0, 1, 3]))
        for i in range(3):
            np.testing.assert_allclose(logits[i], scalar_forward(m, x[i].ravel().tolist()), atol=1e-12)

    def test_dimension_mismatch(self, tiny_spec):
        with pytest.raises(ConfigurationError):
            forward_loss(zeros_model(tiny_spec), Batch(np.zeros((2, 5)), [0, 1]))

    def test_label_out_of_range(self, tiny_spec):
        with pytest.raises(ConfigurationError):
            forward_loss(zeros_model(tiny_spec), Batch(np.zeros((1, 4)), [3]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_loss_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        spec = random_spec(rng)
        m = init_model(spec, rng)
        n = int(rng.integers(1, 6))
        x = rng.standard_normal((n, spec.layers[0].in_size)) * 5
        loss, _ = forward_loss(m, Batch(x, rng.integers(0, spec.num_classes, n)))
        assert loss >= 0.0


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_dense_matches_finite_differences(self, seed):
        m, x, y = fd_instance(seed)
        _, gw, gb = gradients(m, Batch(x, y))
        fw, fb = finite_difference(m, x, y, eps=1e-4)
        assert relative_error(gw, fw).max() <= 1e-3
        assert relative_error(gb, fb).max() <= 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_conv_matches_finite_differences(self, seed):
        m, x, y = fd_instance(100 + seed, conv=True)
        _, gw, gb = gradients(m, Batch(x, y))
        fw, fb = finite_difference(m, x, y, eps=1e-4)
        assert relative_error(gw, fw).max() <= 1e-3
        assert relative_error(gb, fb).max() <= 1e-3


class TestSgdStep:
    def test_zero_lr_is_identity(self, tiny_spec, rng):
        m = init_model(tiny_spec, rng)
        out = sgd_step(m, np.ones(tiny_spec.weight_count, bool), Batch(rng.standard_normal((3, 4)), [0, 1, 2]), 0.0)
        assert out.identical(m)

    def test_all_zero_mask(self, tiny_spec, rng):
        m = init_model(tiny_spec, rng)
        out = sgd_step(m, np.zeros(tiny_spec.weight_count, bool), Batch(rng.standard_normal((3, 4)), [0, 1, 2]), 0.1)
        assert np.all(out.weights == 0.0)
        assert not np.array_equal(out.biases, m.biases)

    def test_update_rule(self, tiny_spec, rng):
        m = init_model(tiny_spec, rng)
        batch = Batch(rng.standard_normal((5, 4)), [0, 1, 2, 0, 1])
        mask = rng.random(tiny_spec.weight_count) < 0.6
        _, gw, gb = gradients(m, batch)
        out = sgd_step(m, mask, batch, 0.3)
        np.testing.assert_array_equal(out.weights, (m.weights - 0.3 * gw * mask) * mask)
        np.testing.assert_array_equal(out.biases, m.biases - 0.3 * gb)

    def test_negative_lr(self, tiny_spec):
        with pytest.raises(UsageError):
            sgd_step(zeros_model(tiny_spec), np.ones(tiny_spec.weight_count), Batch(np.zeros((1, 4)), [0]), -1)

    def test_mask_length_checked(self, tiny_spec):
        with pytest.raises(ConfigurationError):
            sgd_step(zeros_model(tiny_spec), np.ones(3), Batch(np.zeros((1, 4)), [0]), 0.1)

    def test_divergence_raises(self, tiny_spec):
        m = FlatModel(tiny_spec, np.full(tiny_spec.weight_count, np.inf), np.zeros(tiny_spec.bias_count))
        with pytest.raises(NumericDivergence):
            sgd_step(m, np.ones(tiny_spec.weight_count), Batch(np.ones((1, 4)), [0]), 0.1)


class TestTrainLocal:
    def _count_steps(self, monkeypatch):
        calls = []
        real = nn.sgd_step

        def counting(*args, **kwargs):
            calls.append(len(args[2]))
            return real(*args, **kwargs)

        monkeypatch.setattr(nn, "sgd_step", counting)
        return calls

    def test_single_sample(self, monkeypatch, tiny_spec, rng):
        calls = self._count_steps(monkeypatch)
        train_local(init_model(tiny_spec, rng), np.ones(tiny_spec.weight_count), Batch(np.ones((1, 4)), [2]), 1, 32, 0.1, rng)
        assert calls == [1]

    def test_step_count_for_hundred_samples(self, monkeypatch, tiny_spec, rng):
        calls = self._count_steps(monkeypatch)
        data = Batch(rng.standard_normal((100, 4)), rng.integers(0, 3, 100))
        train_local(init_model(tiny_spec, rng), np.ones(tiny_spec.weight_count), data, 10, 32, 0.01, rng)
        assert len(calls) == 10 * math.ceil(100 / 32) == 40
        assert calls[:4] == [32, 32, 32, 4]

    def test_loss_decreases_on_separable_data(self, separable_batch):
        spec = mlp(4, (8,), 2)
        rng = np.random.default_rng(5)
        m = init_model(spec, rng)
        before, _ = forward_loss(m, separable_batch)
        out = train_local(m, np.ones(spec.weight_count), separable_batch, 5, 8, 0.05, rng)
        after, _ = forward_loss(out, separable_batch)
        assert after < before

    def test_mask_invariance(self, rng):
        spec = mlp(6, (10, 8), 4)
        m = init_model(spec, rng)
        mask = rng.random(spec.weight_count) < 0.3
        data = Batch(rng.standard_normal((50, 6)), rng.integers(0, 4, 50))
        out = train_local(m, mask, data, 3, 8, 0.2, rng)
        assert np.all(out.weights[~mask] == 0.0)
        assert np.all(out.weights[mask] != 0.0)

    def test_deterministic(self, tiny_spec):
        data = Batch(np.random.default_rng(1).standard_normal((30, 4)), np.arange(30) % 3)
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(77)
            m = init_model(tiny_spec, np.random.default_rng(3))
            outs.append(train_local(m, np.ones(tiny_spec.weight_count), data, 3, 7, 0.1, rng))
        assert outs[0].identical(outs[1])

    def test_zero_epochs_returns_copy(self, tiny_spec, rng):
        m = init_model(tiny_spec, rng)
        out = train_local(m, np.ones(tiny_spec.weight_count), Batch(np.ones((2, 4)), [0, 1]), 0, 4, 0.1, rng)
        assert out.identical(m) and out is not m

    def test_empty_data(self, tiny_spec, rng):
        with pytest.raises(UsageError):
            train_local(zeros_model(tiny_spec), np.ones(tiny_spec.weight_count), Batch(np.zeros((0, 4)), []), 1, 4, 0.1, rng)


class TestAccuracy:
    def test_constant_predictor(self):
        spec = ModelSpec((Dense(2, 3, "identity"),))
        model = FlatModel(spec, np.zeros(6), np.array([1.0, 0.0, 0.0]))
        data = Batch(np.ones((4, 2)), [0, 1, 0, 2])
        assert evaluate_accuracy(model, data) == 0.5

    def test_perfect_lookup(self):
        spec = ModelSpec((Dense(3, 3, "identity"),))
        model = FlatModel(spec, np.eye(3).ravel(), np.zeros(3))
        assert evaluate_accuracy(model, Batch(np.eye(3), [0, 1, 2])) == 1.0

    def test_zero_model_ties_to_class_zero(self):
        rng = np.random.default_rng(9)
        labels = rng.integers(0, 10, 200)
        spec = mlp(5, (4,), 10)
        acc = evaluate_accuracy(zeros_model(spec), Batch(rng.standard_normal((200, 5)), labels))
        assert acc == np.count_nonzero(labels == 0) / 200

    def test_empty(self, tiny_spec):
        with pytest.raises(UsageError):
            evaluate_accuracy(zeros_model(tiny_spec), Batch(np.zeros((0, 4)), []))
