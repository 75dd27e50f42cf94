"""Small feed-forward networks over a flat parameter vector.

All weights of a model live in one contiguous float64 vector (the part that
masks and pruning act on) and all biases in a second vector. Layers read
views into those vectors, so averaging and masking a model reduce to
plain numpy arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericDivergence, UsageError

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    activation: str = "relu"

    kind = "dense"

    @property
    def in_size(self) -> int:
        return self.in_features

    @property
    def out_size(self) -> int:
        return self.out_features

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_features, self.in_features)

    @property
    def fan_in(self) -> int:
        return self.in_features

    def to_dict(self) -> dict:
        return {
            "kind": "dense",
            "in_features": self.in_features,
            "out_features": self.out_features,
            "activation": self.activation,
        }


@dataclass(frozen=True)
class Conv2d:
    """Valid (unpadded) stride-1 convolution, optionally followed by max pooling.

    Input and output are laid out channel-first, ``(C, H, W)``.
    """

    in_channels: int
    out_channels: int
    kernel_size: int
    height: int
    width: int
    activation: str = "relu"
    pool: int = 1

    kind = "conv2d"

    @property
    def conv_hw(self) -> tuple[int, int]:
        return (self.height - self.kernel_size + 1, self.width - self.kernel_size + 1)

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.height, self.width)

    @property
    def out_shape(self) -> tuple[int, int, int]:
        h, w = self.conv_hw
        return (self.out_channels, h // self.pool, w // self.pool)

    @property
    def in_size(self) -> int:
        return math.prod(self.in_shape)

    @property
    def out_size(self) -> int:
        return math.prod(self.out_shape)

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    @property
    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size * self.kernel_size

    def to_dict(self) -> dict:
        return {
            "kind": "conv2d",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": self.kernel_size,
            "height": self.height,
            "width": self.width,
            "activation": self.activation,
            "pool": self.pool,
        }


Layer = Union[Dense, Conv2d]


def layer_from_dict(d: dict) -> Layer:
    d = dict(d)
    kind = d.pop("kind", None)
    try:
        if kind == "dense":
            return Dense(**d)
        if kind == "conv2d":
            return Conv2d(**d)
    except TypeError as exc:
        raise ConfigurationError(f"bad {kind} layer fields: {exc}") from None
    raise ConfigurationError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class ModelSpec:
    """Layer stack of a classifier trained with softmax cross-entropy."""

    layers: tuple[Layer, ...]
    _w_offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)
    _b_offsets: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ConfigurationError("model needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(f"layer {i}: unknown activation {layer.activation!r}")
            if min(layer.weight_shape) < 1:
                raise ConfigurationError(f"layer {i}: empty weight tensor {layer.weight_shape}")
            if isinstance(layer, Conv2d):
                h, w = layer.conv_hw
                if h < 1 or w < 1:
                    raise ConfigurationError(f"layer {i}: kernel larger than input")
                if layer.pool < 1 or h % layer.pool or w % layer.pool:
                    raise ConfigurationError(
                        f"layer {i}: pool {layer.pool} does not divide conv output {h}x{w}"
                    )
        for i, (a, b) in enumerate(zip(layers[:-1], layers[1:])):
            if a.out_size != b.in_size:
                raise ConfigurationError(
                    f"layer {i} outputs {a.out_size} values but layer {i + 1} expects {b.in_size}"
                )
            if isinstance(b, Conv2d) and isinstance(a, Conv2d) and a.out_shape != b.in_shape:
                raise ConfigurationError(f"layer {i} output shape {a.out_shape} != {b.in_shape}")
        w_off, b_off = [0], [0]
        for layer in layers:
            w_off.append(w_off[-1] + math.prod(layer.weight_shape))
            b_off.append(b_off[-1] + layer.weight_shape[0])
        object.__setattr__(self, "_w_offsets", tuple(w_off))
        object.__setattr__(self, "_b_offsets", tuple(b_off))

    @property
    def weight_count(self) -> int:
        """Number of prunable parameters, ``d``."""
        return self._w_offsets[-1]

    @property
    def bias_count(self) -> int:
        return self._b_offsets[-1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_size

    @property
    def input_shape(self) -> tuple[int, ...]:
        first = self.layers[0]
        if isinstance(first, Conv2d):
            return first.in_shape
        return (first.in_features,)

    def weight_slice(self, i: int) -> slice:
        return slice(self._w_offsets[i], self._w_offsets[i + 1])

    def bias_slice(self, i: int) -> slice:
        return slice(self._b_offsets[i], self._b_offsets[i + 1])

    def to_dict(self) -> list[dict]:
        return [layer.to_dict() for layer in self.layers]

    @classmethod
    def from_dicts(cls, layers: list[dict]) -> "ModelSpec":
        return cls(tuple(layer_from_dict(d) for d in layers))


def mlp(input_dim: int, hidden: tuple[int, ...], num_classes: int) -> ModelSpec:
    sizes = [input_dim, *hidden, num_classes]
    layers = [
        Dense(a, b, "relu" if i < len(sizes) - 2 else "identity")
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
    ]
    return ModelSpec(tuple(layers))


def lenet5(num_classes: int = 10, channels: int = 3, size: int = 32) -> ModelSpec:
    """Two 5x5 conv layers with 2x2 max pooling, then three dense layers.

    With the CIFAR-10 defaults this has 61,770 weights and 236 biases
    (62,006 parameters in total).
    """
    c1 = Conv2d(channels, 6, 5, size, size, "relu", pool=2)
    _, h, w = c1.out_shape
    c2 = Conv2d(6, 16, 5, h, w, "relu", pool=2)
    flat = c2.out_size
    return ModelSpec(
        (
            c1,
            c2,
            Dense(flat, 120, "relu"),
            Dense(120, 84, "relu"),
            Dense(84, num_classes, "identity"),
        )
    )


@dataclass(eq=False)
class FlatModel:
    spec: ModelSpec
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.shape != (self.spec.weight_count,):
            raise ConfigurationError(
                f"expected {self.spec.weight_count} weights, got shape {self.weights.shape}"
            )
        if self.biases.shape != (self.spec.bias_count,):
            raise ConfigurationError(
                f"expected {self.spec.bias_count} biases, got shape {self.biases.shape}"
            )

    def copy(self) -> "FlatModel":
        return FlatModel(self.spec, self.weights.copy(), self.biases.copy())

    def layer_params(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        layer = self.spec.layers[i]
        w = self.weights[self.spec.weight_slice(i)].reshape(layer.weight_shape)
        return w, self.biases[self.spec.bias_slice(i)]

    def identical(self, other: "FlatModel") -> bool:
        """Bit-exact equality of both parameter vectors."""
        return (
            self.spec == other.spec
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.biases, other.biases)
        )

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.biases).all())


def zeros_model(spec: ModelSpec) -> FlatModel:
    return FlatModel(spec, np.zeros(spec.weight_count), np.zeros(spec.bias_count))


def init_model(spec: ModelSpec, rng: np.random.Generator) -> FlatModel:
    """Weights uniform in +-1/sqrt(fan_in) per layer, biases zero."""
    weights = np.empty(spec.weight_count)
    for i, layer in enumerate(spec.layers):
        bound = 1.0 / math.sqrt(layer.fan_in)
        sl = spec.weight_slice(i)
        weights[sl] = rng.uniform(-bound, bound, size=sl.stop - sl.start)
    return FlatModel(spec, weights, np.zeros(spec.bias_count))


@dataclass(eq=False)
class Batch:
    """Inputs shaped ``(n, *input_shape)`` with integer labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.inputs.shape[:1] != self.labels.shape:
            raise ConfigurationError(
                f"{self.inputs.shape[0] if self.inputs.ndim else 0} inputs vs "
                f"{self.labels.shape} labels"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx: np.ndarray) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx])


def _check_batch(spec: ModelSpec, batch: Batch) -> np.ndarray:
    if len(batch) == 0:
        raise UsageError("empty batch")
    x = batch.inputs
    n = len(batch)
    if math.prod(x.shape[1:]) != spec.layers[0].in_size:
        raise ConfigurationError(
            f"input of {x.shape[1:]} does not match model input {spec.input_shape}"
        )
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ConfigurationError(f"labels must lie in [0, {spec.num_classes})")
    return x.reshape((n, *spec.input_shape))


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # (n, C, H, W) -> (n, Ho, Wo, C*k*k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # n, C, Ho, Wo, k, k
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * k * k)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = h - k + 1, w - k + 1
    d = dcols.reshape(n, ho, wo, c, k, k)
    dx = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i : i + ho, j : j + wo] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def _pool_forward(a: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = a.shape
    win = a.reshape(n, c, h // p, p, w // p, p).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // p, w // p, p * p)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def _pool_backward(dout: np.ndarray, arg: np.ndarray, p: int) -> np.ndarray:
    n, c, hp, wp = dout.shape
    dwin = np.zeros((n, c, hp, wp, p * p))
    np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(n, c, hp, wp, p, p).transpose(0, 1, 2, 4, 3, 5)
    return dwin.reshape(n, c, hp * p, wp * p)


def _forward(model: FlatModel, x: np.ndarray, keep: bool):
    spec = model.spec
    caches = []
    h = x
    for i, layer in enumerate(spec.layers):
        w, b = model.layer_params(i)
        if isinstance(layer, Dense):
            inp = h.reshape(h.shape[0], -1)
            z = inp @ w.T + b
            a = np.maximum(z, 0.0) if layer.activation == "relu" else z
            if keep:
                caches.append((inp, z, None))
            h = a
        else:
            inp = h.reshape((h.shape[0], *layer.in_shape))
            cols = _im2col(inp, layer.kernel_size)
            z = cols @ w.reshape(layer.out_channels, -1).T + b  # n, Ho, Wo, O
            z = z.transpose(0, 3, 1, 2)
            a = np.maximum(z, 0.0) if layer.activation == "relu" else z
            arg = None
            if layer.pool > 1:
                a, arg = _pool_forward(a, layer.pool)
            if keep:
                caches.append((cols, z, arg))
            h = a
    return h.reshape(h.shape[0], -1), caches


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = labels.shape[0]
    loss = float(-log_p[np.arange(n), labels].mean())
    return max(loss, 0.0), log_p


def forward_loss(model: FlatModel, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch, and the raw logits."""
    x = _check_batch(model.spec, batch)
    logits, _ = _forward(model, x, keep=False)
    loss, _ = _cross_entropy(logits, batch.labels)
    return loss, logits


def gradients(model: FlatModel, batch: Batch) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss together with its gradient w.r.t. the weight and bias vectors."""
    spec = model.spec
    x = _check_batch(spec, batch)
    n = len(batch)
    logits, caches = _forward(model, x, keep=True)
    loss, log_p = _cross_entropy(logits, batch.labels)

    grad_w = np.zeros(spec.weight_count)
    grad_b = np.zeros(spec.bias_count)
    delta = np.exp(log_p)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n  # d loss / d logits

    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        w, _ = model.layer_params(i)
        inp, z, arg = caches[i]
        if isinstance(layer, Dense):
            dz = delta.reshape(n, -1)
            if layer.activation == "relu":
                dz = dz * (z > 0)
            grad_w[spec.weight_slice(i)] = (dz.T @ inp).ravel()
            grad_b[spec.bias_slice(i)] = dz.sum(axis=0)
            if i:
                delta = dz @ w
        else:
            cols = inp
            da = delta.reshape((n, *layer.out_shape))
            if layer.pool > 1:
                da = _pool_backward(da, arg, layer.pool)
            dz = da * (z > 0) if layer.activation == "relu" else da
            dz_flat = dz.transpose(0, 2, 3, 1).reshape(-1, layer.out_channels)
            cols_flat = cols.reshape(-1, cols.shape[-1])
            grad_w[spec.weight_slice(i)] = (dz_flat.T @ cols_flat).ravel()
            grad_b[spec.bias_slice(i)] = dz_flat.sum(axis=0)
            if i:
                dcols = dz_flat @ w.reshape(layer.out_channels, -1)
                delta = _col2im(dcols, (n, *layer.in_shape), layer.kernel_size)
    return loss, grad_w, grad_b


def _mask_array(mask, d: int) -> np.ndarray:
    bits = np.asarray(getattr(mask, "bits", mask))
    if bits.shape != (d,):
        raise ConfigurationError(f"mask of shape {bits.shape} for {d} weights")
    return bits.astype(np.float64)


def sgd_step(model: FlatModel, mask, batch: Batch, lr: float) -> FlatModel:
    """One plain SGD step with the gradient and the result both masked.

    Pruned coordinates come out exactly zero; biases are never masked.
    """
    if lr < 0:
        raise UsageError(f"learning rate must be >= 0, got {lr}")
    m = _mask_array(mask, model.spec.weight_count)
    with np.errstate(over="ignore", invalid="ignore"):
        loss, gw, gb = gradients(model, batch)
    if not (math.isfinite(loss) and np.isfinite(gw).all() and np.isfinite(gb).all()):
        raise NumericDivergence("non-finite loss or gradient during SGD")
    weights = (model.weights - lr * (gw * m)) * m
    biases = model.biases - lr * gb
    return FlatModel(model.spec, weights, biases)


def train_local(
    model: FlatModel,
    mask,
    data: Batch,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
) -> FlatModel:
    """Run ``epochs`` shuffled passes of minibatch SGD over ``data``.

    The last minibatch of an epoch may be short. ``epochs=0`` returns a copy.
    """
    if epochs < 0 or batch_size < 1:
        raise UsageError(f"need epochs >= 0 and batch_size >= 1, got {epochs}, {batch_size}")
    n = len(data)
    if n == 0:
        raise UsageError("cannot train on an empty dataset")
    out = model.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            out = sgd_step(out, mask, data.subset(order[start : start + batch_size]), lr)
    return out


def predict(model: FlatModel, data: Batch) -> np.ndarray:
    x = _check_batch(model.spec, data)
    logits, _ = _forward(model, x, keep=False)
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return logits.argmax(axis=1)


def evaluate_accuracy(model: FlatModel, data: Batch) -> float:
    if len(data) == 0:
        raise UsageError("accuracy of an empty set is undefined")
    return float((predict(model, data) == data.labels).mean())
