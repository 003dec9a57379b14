"""From-scratch dense network with dropout for the 1-D regression experiment.

Everything is plain numpy: rectified-linear hidden layers, identity output,
inverted dropout (survivors scaled by 1/(1-p)) on the inputs of every layer
after the first, minibatch gradient descent on mean squared error with L2
weight decay. Monte-Carlo prediction draws one set of dropout masks per
realization and applies the identical set to every input, which is what makes
cross-input covariances estimable.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .covariance import REGRESSION, PredictionSamples
from .errors import TrainingDivergedError, ValidationError
from .rng import as_generator


@dataclass(frozen=True, eq=False)
class DenseNet:
    """Fully-connected network; ``weights[i]`` maps width ``layer_sizes[i]``
    to ``layer_sizes[i+1]``."""

    layer_sizes: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    dropout_prob: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValidationError("layer_sizes needs at least input and output widths")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValidationError("dropout_prob must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValidationError("weight_decay must be non-negative")
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValidationError("need one weight matrix and bias per layer")
        weights = []
        biases = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64, copy=True)
            b = np.array(b, dtype=np.float64, copy=True)
            if w.shape != (sizes[i], sizes[i + 1]) or b.shape != (sizes[i + 1],):
                raise ValidationError(f"layer {i} parameter shapes do not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"layer {i} has non-finite parameters")
            w.setflags(write=False)
            b.setflags(write=False)
            weights.append(w)
            biases.append(b)
        object.__setattr__(self, "weights", tuple(weights))
        object.__setattr__(self, "biases", tuple(biases))

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def mask_widths(self) -> tuple[int, ...]:
        """Widths of the masked layer inputs: every layer input except the raw
        network input."""
        return self.layer_sizes[1:-1]

    @classmethod
    def random(
        cls,
        layer_sizes,
        dropout_prob: float = 0.0,
        weight_decay: float = 0.0,
        rng=0,
        init_scale: float | None = None,
    ) -> "DenseNet":
        """He-style initialization by default, or a fixed Gaussian scale for
        weights *and* biases when ``init_scale`` is given."""
        generator, _ = as_generator(rng)
        sizes = tuple(int(s) for s in layer_sizes)
        weights = []
        biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = init_scale if init_scale is not None else np.sqrt(2.0 / fan_in)
            weights.append(generator.normal(0.0, scale, size=(fan_in, fan_out)))
            if init_scale is not None:
                biases.append(generator.normal(0.0, init_scale, size=fan_out))
            else:
                biases.append(np.zeros(fan_out))
        return cls(sizes, tuple(weights), tuple(biases), dropout_prob, weight_decay)


@dataclass(frozen=True, eq=False)
class DropoutMaskSet:
    """One realization of per-layer binary keep masks."""

    masks: tuple[np.ndarray, ...]
    seed: int | None = None

    def __post_init__(self):
        masks = []
        for m in self.masks:
            m = np.array(m, dtype=np.float64, copy=True)
            if m.ndim != 1 or not np.all((m == 0.0) | (m == 1.0)):
                raise ValidationError("masks must be 1-D binary vectors")
            m.setflags(write=False)
            masks.append(m)
        object.__setattr__(self, "masks", tuple(masks))


def draw_mask_set(net: DenseNet, rng) -> DropoutMaskSet:
    """One Bernoulli(1 - p) keep mask per masked layer input."""
    generator, seed = as_generator(rng)
    keep = 1.0 - net.dropout_prob
    masks = tuple(
        (generator.random(width) < keep).astype(np.float64) for width in net.mask_widths
    )
    return DropoutMaskSet(masks, seed=seed)


def _as_batch(net: DenseNet, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        if net.layer_sizes[0] != 1:
            raise ValidationError("1-D input only valid for a 1-input network")
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[1] != net.layer_sizes[0]:
        raise ValidationError(
            f"input shape {arr.shape} does not match input width {net.layer_sizes[0]}"
        )
    return arr


def _check_masks(net: DenseNet, mask_set: DropoutMaskSet) -> None:
    widths = tuple(m.shape[0] for m in mask_set.masks)
    if widths != net.mask_widths:
        raise ValidationError(
            f"mask widths {widths} do not match layer inputs {net.mask_widths}"
        )


def forward(net: DenseNet, x, mask_set: DropoutMaskSet | None = None) -> np.ndarray:
    """Predictions of shape (n, output_width).

    With a mask set, masked units are zeroed and survivors scaled by
    1/(1 - p); without one the pass is deterministic (dropout off).
    """
    h = _as_batch(net, x)
    if mask_set is not None:
        _check_masks(net, mask_set)
        scale = 1.0 / (1.0 - net.dropout_prob)
    last = net.num_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if i > 0 and mask_set is not None:
            h = h * (mask_set.masks[i - 1] * scale)
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def loss_and_gradients(
    net: DenseNet, x, y, mask_set: DropoutMaskSet | None = None
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Loss (MSE plus L2 weight penalty) and its gradients via backprop.

    Returns ``(loss, weight_grads, bias_grads)``. The L2 term penalizes
    weights only, not biases.
    """
    inputs = _as_batch(net, x)
    targets = np.asarray(y, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets[:, None]
    if targets.shape != (inputs.shape[0], net.layer_sizes[-1]):
        raise ValidationError(f"target shape {targets.shape} does not match output")
    if mask_set is not None:
        _check_masks(net, mask_set)
    scale = 1.0 / (1.0 - net.dropout_prob)
    last = net.num_layers - 1

    layer_inputs = []  # effective (post-mask) input to each layer
    pre_activations = []
    h = inputs
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if i > 0 and mask_set is not None:
            h = h * (mask_set.masks[i - 1] * scale)
        layer_inputs.append(h)
        z = h @ w + b
        pre_activations.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    pred = h

    residual = pred - targets
    lam = net.weight_decay
    loss = float(np.mean(residual**2)) + lam * sum(
        float(np.sum(w**2)) for w in net.weights
    )

    weight_grads: list[np.ndarray] = [None] * net.num_layers  # type: ignore[list-item]
    bias_grads: list[np.ndarray] = [None] * net.num_layers  # type: ignore[list-item]
    dz = 2.0 * residual / residual.size
    for i in range(last, -1, -1):
        weight_grads[i] = layer_inputs[i].T @ dz + 2.0 * lam * net.weights[i]
        bias_grads[i] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ net.weights[i].T
            if mask_set is not None:
                dh = dh * (mask_set.masks[i - 1] * scale)
            dz = dh * (pre_activations[i - 1] > 0.0)
    return loss, weight_grads, bias_grads


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float
    minibatch_size: int
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ValidationError("epochs and minibatch_size must be positive")
        if self.learning_rate < 0.0:
            raise ValidationError("learning_rate must be non-negative")


def train(net: DenseNet, dataset, config: TrainConfig) -> tuple[DenseNet, list[float]]:
    """Minibatch gradient descent with fresh dropout masks per minibatch.

    Returns the trained network and the loss curve (deterministic full-data
    loss before training and after each epoch).
    """
    x, y = dataset
    inputs = _as_batch(net, x)
    if inputs.shape[0] == 0:
        raise ValidationError("training dataset is empty")
    targets = np.asarray(y, dtype=np.float64)
    generator, _ = as_generator(config.seed)
    current = net
    losses = [loss_and_gradients(current, inputs, targets)[0]]
    n = inputs.shape[0]
    for _ in range(config.epochs):
        order = generator.permutation(n)
        for start in range(0, n, config.minibatch_size):
            batch = order[start : start + config.minibatch_size]
            mask_set = (
                draw_mask_set(current, generator) if current.dropout_prob > 0 else None
            )
            _, w_grads, b_grads = loss_and_gradients(
                current, inputs[batch], targets[batch], mask_set
            )
            current = DenseNet(
                current.layer_sizes,
                tuple(w - config.learning_rate * g for w, g in zip(current.weights, w_grads)),
                tuple(b - config.learning_rate * g for b, g in zip(current.biases, b_grads)),
                current.dropout_prob,
                current.weight_decay,
            )
        epoch_loss = loss_and_gradients(current, inputs, targets)[0]
        if not np.isfinite(epoch_loss):
            raise TrainingDivergedError(f"non-finite loss after epoch: {epoch_loss}")
        losses.append(epoch_loss)
    return current, losses


GENERATOR_HIDDEN = (32, 32)
GENERATOR_PARAM_SD = 1.5  # wide enough that the 1-D generator is visibly non-linear
INPUT_RANGE = (-10.0, 10.0)
_STANDARDIZATION_GRID = 201


def make_generator_net(rng) -> DenseNet:
    """Random ground-truth network for the synthetic 1-D task.

    Parameters are zero-mean Gaussian draws; the output is then standardized
    to zero mean and unit variance over the input range (folded affinely into
    the last layer) so downstream training hyperparameters are scale-free.
    """
    net = DenseNet.random(
        (1, *GENERATOR_HIDDEN, 1), rng=rng, init_scale=GENERATOR_PARAM_SD
    )
    grid = np.linspace(*INPUT_RANGE, _STANDARDIZATION_GRID)
    outputs = forward(net, grid)[:, 0]
    sd = max(float(outputs.std()), 1e-9)
    mean = float(outputs.mean())
    last = net.num_layers - 1
    weights = list(net.weights)
    biases = list(net.biases)
    weights[last] = weights[last] / sd
    biases[last] = (biases[last] - mean) / sd
    return DenseNet(net.layer_sizes, tuple(weights), tuple(biases))


def make_1d_regression_net(
    hidden_sizes, dropout_prob: float, weight_decay: float, rng
) -> DenseNet:
    """Network for fitting the 1-D task, initialized for the input range.

    Plain He init assumes unit-variance inputs; with inputs spanning [-10, 10]
    and a fan-in of one, that puts every first-layer kink at x = 0 and blows
    activations up. Here first-layer weights are He-scaled by the input
    standard deviation and biases place the kinks uniformly across the range;
    deeper layers are standard He.
    """
    generator, _ = as_generator(rng)
    sizes = (1, *tuple(int(h) for h in hidden_sizes), 1)
    lo, hi = INPUT_RANGE
    input_sd = (hi - lo) / np.sqrt(12.0)
    first_width = sizes[1]
    w1 = generator.normal(0.0, np.sqrt(2.0) / input_sd, size=(1, first_width))
    kinks = generator.uniform(lo, hi, size=first_width)
    b1 = -(w1[0] * kinks)
    weights = [w1]
    biases = [b1]
    for fan_in, fan_out in zip(sizes[1:-1], sizes[2:]):
        weights.append(generator.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return DenseNet(sizes, tuple(weights), tuple(biases), dropout_prob, weight_decay)


def generate_1d_data(
    rng, n: int, noise_sd: float, generator: DenseNet | None = None
) -> tuple[np.ndarray, np.ndarray, DenseNet]:
    """Inputs uniform on [-10, 10]; outputs from the generator net plus
    i.i.d. Gaussian observation noise. Returns ``(x, y, generator)``."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if noise_sd < 0:
        raise ValidationError("noise_sd must be non-negative")
    gen_rng, _ = as_generator(rng)
    if generator is None:
        generator = make_generator_net(gen_rng)
    x = gen_rng.uniform(*INPUT_RANGE, size=n)
    clean = forward(generator, x)[:, 0]
    y = clean + gen_rng.normal(0.0, noise_sd, size=n) if noise_sd > 0 else clean.copy()
    return x, y, generator


def mc_predict_shared_masks(
    net: DenseNet, inputs, mask_count: int, seed: int
) -> PredictionSamples:
    """J dropout realizations over all inputs, sharing each mask set.

    Mask sets are drawn once; realization j applies its identical masks to
    every input, so identical inputs give bitwise-identical columns.
    """
    if mask_count < 2:
        raise ValidationError("mask_count must be >= 2")
    if net.layer_sizes[-1] != 1:
        raise ValidationError("shared-mask prediction expects a single-output network")
    arr = _as_batch(net, inputs)
    generator, _ = as_generator(int(seed))
    mask_sets = [draw_mask_set(net, generator) for _ in range(mask_count)]
    rows = np.stack([forward(net, arr, ms)[:, 0] for ms in mask_sets])
    return PredictionSamples(
        kind=REGRESSION,
        values=rows,
        num_points=arr.shape[0],
        num_classes=1,
        mask_count=mask_count,
        seed=int(seed),
    )


def tau_from_hyperparams(
    dropout_prob: float, length_scale: float, train_size: int, weight_decay: float
) -> float:
    """Model precision ``tau = (1 - p) * l^2 / (2 * N * lambda)``."""
    if not 0.0 <= dropout_prob < 1.0:
        raise ValidationError("dropout_prob must lie in [0, 1)")
    if length_scale <= 0.0:
        raise ValidationError("length_scale must be positive")
    if train_size <= 0:
        raise ValidationError("train_size must be positive")
    if weight_decay <= 0.0:
        raise ValidationError("weight_decay must be positive")
    return (1.0 - dropout_prob) * length_scale**2 / (2.0 * train_size * weight_decay)


def save_net(net: DenseNet, path) -> None:
    payload = {
        "layer_sizes": list(net.layer_sizes),
        "p": net.dropout_prob,
        "lambda": net.weight_decay,
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    Path(path).write_text(json.dumps(payload) + "\n")


def load_net(path) -> DenseNet:
    payload = json.loads(Path(path).read_text())
    return DenseNet(
        layer_sizes=tuple(payload["layer_sizes"]),
        weights=tuple(np.array(w, dtype=np.float64) for w in payload["weights"]),
        biases=tuple(np.array(b, dtype=np.float64) for b in payload["biases"]),
        dropout_prob=float(payload["p"]),
        weight_decay=float(payload["lambda"]),
    )
