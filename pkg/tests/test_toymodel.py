import numpy as np
import pytest

from deimos import (
    DenseNet,
    DropoutMaskSet,
    InsufficientSamplesError,
    TrainConfig,
    TrainingDivergedError,
    ValidationError,
    estimate_regression_covariance,
    forward,
    generate_1d_data,
    loss_and_gradients,
    mc_predict_shared_masks,
    tau_from_hyperparams,
    train,
)
from deimos.toymodel import draw_mask_set, load_net, make_generator_net, save_net


def perturbed(net: DenseNet, layer: int, which: str, index, delta: float) -> DenseNet:
    weights = [w.copy() for w in net.weights]
    biases = [b.copy() for b in net.biases]
    if which == "w":
        weights[layer][index] += delta
    else:
        biases[layer][index] += delta
    return DenseNet(net.layer_sizes, tuple(weights), tuple(biases),
                    net.dropout_prob, net.weight_decay)


def numeric_gradient_check(net, x, y, mask_set=None, step=1e-5, rel_tol=1e-4):
    """Central finite differences on every parameter, with masks fixed."""
    _, w_grads, b_grads = loss_and_gradients(net, x, y, mask_set)
    worst = 0.0
    for layer in range(net.num_layers):
        for which, grads, shape in (
            ("w", w_grads[layer], net.weights[layer].shape),
            ("b", b_grads[layer], net.biases[layer].shape),
        ):
            for index in np.ndindex(shape):
                plus = loss_and_gradients(
                    perturbed(net, layer, which, index, step), x, y, mask_set
                )[0]
                minus = loss_and_gradients(
                    perturbed(net, layer, which, index, -step), x, y, mask_set
                )[0]
                numeric = (plus - minus) / (2.0 * step)
                analytic = grads[index]
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
                worst = max(worst, err)
    assert worst <= rel_tol, f"worst relative gradient error {worst:g}"
    return worst


def small_random_net(rng, with_dropout=True):
    sizes = (
        int(rng.integers(1, 4)),
        int(rng.integers(2, 6)),
        int(rng.integers(2, 6)),
        int(rng.integers(1, 3)),
    )
    # Random biases (init_scale) keep pre-activations off the relu kink,
    # where central differences would be invalid.
    return DenseNet.random(
        sizes,
        dropout_prob=0.3 if with_dropout else 0.0,
        weight_decay=float(rng.uniform(0.0, 0.01)),
        rng=rng,
        init_scale=0.8,
    )


def min_abs_preactivation(net, x, mask_set):
    """Smallest |pre-activation| of the forward pass; used to filter
    kink-adjacent instances where finite differences are meaningless."""
    h = np.asarray(x, dtype=np.float64)
    scale = 1.0 / (1.0 - net.dropout_prob)
    smallest = np.inf
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if i > 0 and mask_set is not None:
            h = h * (mask_set.masks[i - 1] * scale)
        z = h @ w + b
        smallest = min(smallest, float(np.abs(z).min()))
        h = np.maximum(z, 0.0) if i < net.num_layers - 1 else z
    return smallest


def draw_checkable_instance(rng):
    while True:
        net = small_random_net(rng)
        x = rng.normal(size=(6, net.layer_sizes[0]))
        y = rng.normal(size=(6, net.layer_sizes[-1]))
        masks = draw_mask_set(net, rng) if net.dropout_prob > 0 else None
        if min_abs_preactivation(net, x, masks) > 1e-3:
            return net, x, y, masks


class TestDenseNet:
    def test_shapes_must_chain(self):
        with pytest.raises(ValidationError):
            DenseNet((1, 3, 1), (np.zeros((1, 3)), np.zeros((2, 1))),
                     (np.zeros(3), np.zeros(1)))

    def test_dropout_prob_below_one(self):
        with pytest.raises(ValidationError):
            DenseNet.random((1, 4, 1), dropout_prob=1.0)

    def test_mask_widths_skip_raw_input(self):
        net = DenseNet.random((1, 256, 256, 256, 1))
        assert net.mask_widths == (256, 256, 256)

    def test_parameters_frozen(self):
        net = DenseNet.random((1, 3, 1), rng=1)
        with pytest.raises(ValueError):
            net.weights[0][0, 0] = 9.0


class TestForward:
    def test_no_dropout_masked_equals_unmasked(self):
        net = DenseNet.random((1, 5, 5, 1), dropout_prob=0.0, rng=2)
        masks = draw_mask_set(net, 3)  # p=0 -> all ones
        x = np.linspace(-2, 2, 7)
        np.testing.assert_array_equal(forward(net, x, masks), forward(net, x))

    def test_all_ones_masks_scale_layer_inputs(self):
        net = DenseNet.random((1, 4, 1), dropout_prob=0.5, rng=3)
        masks = DropoutMaskSet((np.ones(4),))
        x = np.array([0.3, -1.2])
        hidden = np.maximum(x[:, None] @ net.weights[0] + net.biases[0], 0.0)
        expected = (2.0 * hidden) @ net.weights[1] + net.biases[1]
        np.testing.assert_allclose(forward(net, x, masks), expected, rtol=1e-15)

    def test_all_zero_mask_leaves_downstream_biases(self):
        net = DenseNet.random((1, 4, 3, 1), dropout_prob=0.2, rng=4)
        masks = DropoutMaskSet((np.zeros(4), np.ones(3)))
        x = np.array([0.7])
        hidden2 = np.maximum(net.biases[1], 0.0)  # first hidden contributes nothing
        expected = (hidden2 / (1 - 0.2)) @ net.weights[2] + net.biases[2]
        np.testing.assert_allclose(forward(net, x, masks)[0], expected, rtol=1e-15)

    def test_mask_shape_mismatch(self):
        net = DenseNet.random((1, 4, 1), dropout_prob=0.5, rng=5)
        with pytest.raises(ValidationError):
            forward(net, np.array([1.0]), DropoutMaskSet((np.ones(3),)))

    def test_final_layer_homogeneity(self):
        net = DenseNet.random((2, 6, 3), rng=6)
        alpha = 3.7
        scaled = DenseNet(
            net.layer_sizes,
            (net.weights[0], alpha * net.weights[1]),
            (net.biases[0], alpha * net.biases[1]),
        )
        x = np.random.default_rng(0).normal(size=(5, 2))
        np.testing.assert_allclose(
            forward(scaled, x), alpha * forward(net, x), rtol=1e-12
        )


class TestGradients:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_central_differences(self, seed):
        rng = np.random.default_rng(2000 + seed)
        net, x, y, masks = draw_checkable_instance(rng)
        numeric_gradient_check(net, x, y, masks)

    def test_weight_decay_contributes(self):
        rng = np.random.default_rng(77)
        net = DenseNet.random((2, 4, 1), weight_decay=0.5, rng=rng)
        x = rng.normal(size=(4, 2))
        y = rng.normal(size=(4, 1))
        numeric_gradient_check(net, x, y)


class TestTrain:
    def test_converges_to_least_squares(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-3.0, 3.0, size=40)
        y = 1.7 * x - 0.6 + rng.normal(0.0, 0.05, size=40)
        design = np.column_stack([x, np.ones_like(x)])
        slope, intercept = np.linalg.lstsq(design, y, rcond=None)[0]
        net = DenseNet.random((1, 1), rng=9)
        config = TrainConfig(epochs=2000, learning_rate=0.1, minibatch_size=40, seed=1)
        trained, losses = train(net, (x, y), config)
        assert losses[-1] < losses[0]
        assert trained.weights[0][0, 0] == pytest.approx(slope, abs=1e-3)
        assert trained.biases[0][0] == pytest.approx(intercept, abs=1e-3)

    def test_zero_learning_rate_keeps_parameters(self):
        rng = np.random.default_rng(10)
        net = DenseNet.random((1, 5, 1), dropout_prob=0.2, rng=rng)
        x, y = rng.normal(size=12), rng.normal(size=12)
        trained, _ = train(net, (x, y), TrainConfig(4, 0.0, 4, seed=2))
        for before, after in zip(net.weights, trained.weights):
            np.testing.assert_array_equal(before, after)
        for before, after in zip(net.biases, trained.biases):
            np.testing.assert_array_equal(before, after)

    def test_heavy_decay_shrinks_weights_monotonically(self):
        rng = np.random.default_rng(11)
        net = DenseNet.random((1, 4, 1), weight_decay=10.0, rng=rng)
        x, y = rng.normal(size=8), rng.normal(size=8)
        norms = [sum(float(np.sum(w**2)) for w in net.weights)]
        current = net
        for epoch in range(5):
            current, _ = train(current, (x, y), TrainConfig(1, 0.01, 8, seed=epoch))
            norms.append(sum(float(np.sum(w**2)) for w in current.weights))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_divergence_detected(self):
        rng = np.random.default_rng(12)
        net = DenseNet.random((1, 8, 1), rng=rng)
        x, y = rng.normal(size=16) * 10, rng.normal(size=16)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDivergedError):
                train(net, (x, y), TrainConfig(50, 1e6, 16, seed=3))

    def test_empty_dataset_rejected(self):
        net = DenseNet.random((1, 2, 1), rng=0)
        with pytest.raises(ValidationError):
            train(net, (np.array([]), np.array([])), TrainConfig(1, 0.1, 4))


class TestGenerate1dData:
    def test_deterministic_given_seed(self):
        x1, y1, _ = generate_1d_data(21, 15, 0.0)
        x2, y2, _ = generate_1d_data(21, 15, 0.0)
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)

    def test_noise_free_outputs_match_generator(self):
        x, y, generator = generate_1d_data(22, 10, 0.0)
        np.testing.assert_array_equal(y, forward(generator, x)[:, 0])

    def test_noise_is_additive_on_clean_signal(self):
        x, y, generator = generate_1d_data(23, 25, 0.5)
        clean = forward(generator, x)[:, 0]
        noise = y - clean
        assert np.std(noise) > 0.0
        assert np.all(np.abs(noise) < 5.0)  # 10-sigma bound

    def test_zero_weight_generator_returns_bias(self):
        zero_gen = DenseNet(
            (1, 2, 1),
            (np.zeros((1, 2)), np.zeros((2, 1))),
            (np.array([0.3, -0.1]), np.array([1.25])),
        )
        x, y, _ = generate_1d_data(24, 9, 0.0, generator=zero_gen)
        np.testing.assert_allclose(y, np.full(9, 1.25), rtol=1e-15)

    def test_inputs_stay_in_range(self):
        x, _, _ = generate_1d_data(25, 200, 0.1)
        assert x.min() >= -10.0 and x.max() <= 10.0


class TestMcPredictSharedMasks:
    def test_no_dropout_rows_identical_and_covariance_is_ridge(self):
        net = DenseNet.random((1, 6, 1), dropout_prob=0.0, rng=30)
        samples = mc_predict_shared_masks(net, np.linspace(-1, 1, 4), 5, seed=0)
        assert np.all(samples.values == samples.values[0])
        cov = estimate_regression_covariance(samples, 0.25)
        np.testing.assert_array_equal(cov.matrix, 0.25 * np.eye(4))

    def test_duplicated_inputs_have_identical_columns(self):
        net = DenseNet.random((1, 16, 1), dropout_prob=0.3, rng=31)
        inputs = np.array([0.5, -2.0, 0.5, 3.0])
        samples = mc_predict_shared_masks(net, inputs, 20, seed=1)
        np.testing.assert_array_equal(samples.values[:, 0], samples.values[:, 2])
        cov = estimate_regression_covariance(samples, 0.0)
        assert cov.matrix[0, 0] == cov.matrix[0, 2] == cov.matrix[2, 2]
        correlation = cov.matrix[0, 2] / np.sqrt(cov.matrix[0, 0] * cov.matrix[2, 2])
        assert correlation == 1.0

    def test_seed_reproducibility(self):
        net = DenseNet.random((1, 8, 1), dropout_prob=0.2, rng=32)
        first = mc_predict_shared_masks(net, np.array([0.0, 1.0]), 6, seed=9)
        second = mc_predict_shared_masks(net, np.array([0.0, 1.0]), 6, seed=9)
        np.testing.assert_array_equal(first.values, second.values)
        assert first.seed == 9

    def test_permuting_inputs_permutes_columns(self):
        net = DenseNet.random((1, 8, 1), dropout_prob=0.25, rng=33)
        inputs = np.array([-1.0, 0.3, 2.2, 4.0])
        perm = np.array([2, 0, 3, 1])
        base = mc_predict_shared_masks(net, inputs, 7, seed=3)
        shuffled = mc_predict_shared_masks(net, inputs[perm], 7, seed=3)
        np.testing.assert_array_equal(shuffled.values, base.values[:, perm])

    def test_requires_at_least_two_masks(self):
        net = DenseNet.random((1, 4, 1), dropout_prob=0.2, rng=34)
        with pytest.raises(ValidationError):
            mc_predict_shared_masks(net, np.array([0.0]), 1, seed=0)


class TestTauFromHyperparams:
    def test_reference_values(self):
        tau = tau_from_hyperparams(0.2, 1.0, 100, 0.0005)
        assert tau == 8.0
        assert 1.0 / tau == 0.125

    def test_doubling_train_size_halves_tau(self):
        assert tau_from_hyperparams(0.1, 2.0, 200, 0.001) == pytest.approx(
            tau_from_hyperparams(0.1, 2.0, 100, 0.001) / 2.0, rel=1e-15
        )

    def test_vanishes_as_dropout_approaches_one(self):
        taus = [tau_from_hyperparams(p, 1.0, 50, 0.01) for p in (0.1, 0.5, 0.9, 1 - 1e-9)]
        assert all(b < a for a, b in zip(taus, taus[1:]))
        assert taus[-1] == pytest.approx(0.0, abs=1e-8)

    def test_invalid_inputs_rejected(self):
        with pytest.raises(ValidationError):
            tau_from_hyperparams(0.2, 1.0, 0, 0.001)
        with pytest.raises(ValidationError):
            tau_from_hyperparams(0.2, 1.0, 10, 0.0)


class TestSerialization:
    def test_round_trip_exact(self, tmp_path):
        net = DenseNet.random((1, 5, 3, 1), dropout_prob=0.2, weight_decay=1e-3, rng=40)
        path = tmp_path / "net.json"
        save_net(net, path)
        loaded = load_net(path)
        assert loaded.layer_sizes == net.layer_sizes
        assert loaded.dropout_prob == net.dropout_prob
        assert loaded.weight_decay == net.weight_decay
        for a, b in zip(loaded.weights, net.weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(loaded.biases, net.biases):
            np.testing.assert_array_equal(a, b)

    def test_generator_net_shape(self):
        gen = make_generator_net(0)
        assert gen.layer_sizes == (1, 32, 32, 1)
        assert gen.dropout_prob == 0.0
