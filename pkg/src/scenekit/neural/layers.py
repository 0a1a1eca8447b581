"""
Layer descriptors.

A layer is an immutable description (units, rate, ...). Its tensors live outside it, in a
plain name -> array dict, so one descriptor list can be shared by any number of parameter sets.
Shapes passed to `output_shape` / `param_shapes` exclude the batch axis.
"""

import math
import typing
import dataclasses
import numpy as np
import scipy.special
from scenekit.static.model import LayerType
from scenekit.neural.gru import gru_sequence, gru_sequence_backward

Shape = typing.Tuple[int, ...]
Params = typing.Dict[str, np.ndarray]
Cache = typing.Dict[str, typing.Any]

MAX_DROPOUT: typing.Final = 0.5


def glorot_uniform(rng: np.random.Generator, shape: Shape, fan_in: int, fan_out: int):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_normal(rng: np.random.Generator, shape: Shape, fan_in: int):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


@dataclasses.dataclass(frozen=True)
class Layer:
    kind: typing.ClassVar[LayerType]
    trainable: typing.ClassVar[typing.Tuple[str, ...]] = ()
    weights: typing.ClassVar[typing.Tuple[str, ...]] = ()

    by_kind: typing.ClassVar[typing.Dict[LayerType, typing.Type["Layer"]]] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "kind" in cls.__dict__:
            Layer.by_kind[cls.kind] = cls

    def output_shape(self, shape: Shape) -> Shape:
        return shape

    def param_shapes(self, shape: Shape) -> typing.Dict[str, Shape]:
        return {}

    def init_params(
        self, shape: Shape, rng: np.random.Generator, relu_follows: bool = False
    ) -> Params:
        return {name: np.zeros(size) for name, size in self.param_shapes(shape).items()}

    def forward(
        self, params: Params, x: np.ndarray, train: bool, rng: typing.Optional[np.random.Generator]
    ) -> typing.Tuple[np.ndarray, Cache]:
        raise NotImplementedError

    def backward(
        self, params: Params, cache: Cache, dy: np.ndarray
    ) -> typing.Tuple[np.ndarray, Params]:
        raise NotImplementedError

    def config(self) -> typing.Optional[dict]:
        return None

    @classmethod
    def from_config(cls, config) -> "Layer":
        return cls()


def _expect_rank(layer: Layer, shape: Shape, rank: int, what: str) -> None:
    if len(shape) != rank:
        raise ValueError(f"{type(layer).__name__} expects {what}, got input shape {shape}")


@dataclasses.dataclass(frozen=True)
class Dense(Layer):
    units: int

    kind = LayerType.dense
    trainable = ("W", "b")
    weights = ("W",)

    def output_shape(self, shape: Shape) -> Shape:
        _expect_rank(self, shape, 1, "flat vectors")
        return (self.units,)

    def param_shapes(self, shape: Shape) -> typing.Dict[str, Shape]:
        return dict(W=(shape[0], self.units), b=(self.units,))

    def init_params(self, shape, rng, relu_follows=False) -> Params:
        fan_in = shape[0]
        if relu_follows:
            weight = he_normal(rng, (fan_in, self.units), fan_in)
        else:
            weight = glorot_uniform(rng, (fan_in, self.units), fan_in, self.units)
        return dict(W=weight, b=np.zeros(self.units))

    def forward(self, params, x, train, rng):
        return x @ params["W"] + params["b"], dict(x=x)

    def backward(self, params, cache, dy):
        grads = dict(W=cache["x"].T @ dy, b=dy.sum(axis=0))
        return dy @ params["W"].T, grads

    def config(self) -> dict:
        return dict(Units=self.units)

    @classmethod
    def from_config(cls, config) -> "Dense":
        return cls(units=config.Units)


@dataclasses.dataclass(frozen=True)
class Softmax(Dense):
    """Dense projection to class logits followed by softmax; backward takes d(loss)/d(logits)."""

    kind = LayerType.softmax

    @property
    def classes(self) -> int:
        return self.units

    def forward(self, params, x, train, rng):
        logits = x @ params["W"] + params["b"]
        return scipy.special.softmax(logits, axis=1), dict(x=x)

    def config(self) -> dict:
        return dict(Classes=self.units)

    @classmethod
    def from_config(cls, config) -> "Softmax":
        return cls(units=config.Classes)


@dataclasses.dataclass(frozen=True)
class ReLU(Layer):
    kind = LayerType.relu

    def forward(self, params, x, train, rng):
        active = x > 0
        return x * active, dict(active=active)

    def backward(self, params, cache, dy):
        return dy * cache["active"], {}


@dataclasses.dataclass(frozen=True)
class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1 / (1 - rate) at train time."""

    rate: float

    kind = LayerType.dropout

    def __post_init__(self):
        if not 0.0 <= self.rate <= MAX_DROPOUT:
            raise ValueError(f"Dropout rate {self.rate} outside [0, {MAX_DROPOUT}]")

    def forward(self, params, x, train, rng):
        if not train or self.rate == 0:
            return x, dict(mask=None)
        if rng is None:
            raise ValueError("Train-mode dropout needs a random generator")
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / x.dtype.type(1 - self.rate)
        return x * mask, dict(mask=mask)

    def backward(self, params, cache, dy):
        mask = cache["mask"]
        return (dy if mask is None else dy * mask), {}

    def config(self) -> dict:
        return dict(Rate=self.rate)

    @classmethod
    def from_config(cls, config) -> "Dropout":
        return cls(rate=config.Rate)


@dataclasses.dataclass(frozen=True)
class BatchNorm(Layer):
    """
    Per-feature normalization. Features are the channel axis of (C, H, W) maps and the last
    axis otherwise; statistics pool every other axis, batch included.
    """

    momentum: float = 0.9
    epsilon: float = 1e-5

    kind = LayerType.batchnorm
    trainable = ("gamma", "beta")

    @staticmethod
    def _features(shape: Shape) -> int:
        return shape[0] if len(shape) == 3 else shape[-1]

    @staticmethod
    def _axes(x: np.ndarray) -> typing.Tuple[typing.Tuple[int, ...], Shape]:
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        return tuple(range(x.ndim - 1)), (1,) * (x.ndim - 1) + (-1,)

    def param_shapes(self, shape: Shape) -> typing.Dict[str, Shape]:
        features = (self._features(shape),)
        return dict(gamma=features, beta=features, running_mean=features, running_var=features)

    def init_params(self, shape, rng, relu_follows=False) -> Params:
        features = self._features(shape)
        return dict(
            gamma=np.ones(features),
            beta=np.zeros(features),
            running_mean=np.zeros(features),
            running_var=np.ones(features),
        )

    def forward(self, params, x, train, rng):
        axes, view = self._axes(x)
        cache = dict(train=train, axes=axes, view=view)

        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            cache["count"] = x.size // mean.size
            cache["running"] = (
                self.momentum * params["running_mean"] + (1 - self.momentum) * mean,
                self.momentum * params["running_var"] + (1 - self.momentum) * var,
            )
        else:
            mean, var = params["running_mean"], params["running_var"]

        inverse_std = 1.0 / np.sqrt(var + self.epsilon)
        normalized = (x - mean.reshape(view)) * inverse_std.reshape(view)
        cache.update(normalized=normalized, inverse_std=inverse_std)

        y = params["gamma"].reshape(view) * normalized + params["beta"].reshape(view)
        return y, cache

    def backward(self, params, cache, dy):
        axes, view, normalized = cache["axes"], cache["view"], cache["normalized"]
        grads = dict(gamma=(dy * normalized).sum(axis=axes), beta=dy.sum(axis=axes))

        d_normalized = dy * params["gamma"].reshape(view)
        inverse_std = cache["inverse_std"].reshape(view)
        if not cache["train"]:
            return d_normalized * inverse_std, grads

        count = cache["count"]
        dx = (
            inverse_std
            / count
            * (
                count * d_normalized
                - d_normalized.sum(axis=axes, keepdims=True)
                - normalized * (d_normalized * normalized).sum(axis=axes, keepdims=True)
            )
        )
        return dx, grads

    def config(self) -> dict:
        return dict(Momentum=self.momentum, Epsilon=self.epsilon)

    @classmethod
    def from_config(cls, config) -> "BatchNorm":
        return cls(momentum=config.Momentum, epsilon=config.Epsilon)


@dataclasses.dataclass(frozen=True)
class Conv2D(Layer):
    """3x3 convolution, stride 1, zero "same" padding, over (C, H, W) maps."""

    filters: int

    kind = LayerType.conv2d
    trainable = ("W", "b")
    weights = ("W",)

    KERNEL: typing.ClassVar[int] = 3

    def output_shape(self, shape: Shape) -> Shape:
        _expect_rank(self, shape, 3, "(channels, height, width) maps")
        return (self.filters,) + tuple(shape[1:])

    def param_shapes(self, shape: Shape) -> typing.Dict[str, Shape]:
        return dict(W=(self.filters, shape[0], self.KERNEL, self.KERNEL), b=(self.filters,))

    def init_params(self, shape, rng, relu_follows=False) -> Params:
        size = (self.filters, shape[0], self.KERNEL, self.KERNEL)
        fan_in = shape[0] * self.KERNEL**2
        if relu_follows:
            weight = he_normal(rng, size, fan_in)
        else:
            weight = glorot_uniform(rng, size, fan_in, self.filters * self.KERNEL**2)
        return dict(W=weight, b=np.zeros(self.filters))

    def forward(self, params, x, train, rng):
        height, width = x.shape[2:]
        padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        y = np.zeros((x.shape[0], self.filters, height, width), dtype=x.dtype)
        for i in range(self.KERNEL):
            for j in range(self.KERNEL):
                window = padded[:, :, i : i + height, j : j + width]
                y += np.einsum("nchw,fc->nfhw", window, params["W"][:, :, i, j], optimize=True)
        return y + params["b"].reshape(1, -1, 1, 1), dict(padded=padded)

    def backward(self, params, cache, dy):
        padded = cache["padded"]
        height, width = dy.shape[2:]
        d_padded = np.zeros_like(padded)
        d_weight = np.zeros_like(params["W"])

        for i in range(self.KERNEL):
            for j in range(self.KERNEL):
                window = padded[:, :, i : i + height, j : j + width]
                d_weight[:, :, i, j] = np.einsum("nfhw,nchw->fc", dy, window, optimize=True)
                d_padded[:, :, i : i + height, j : j + width] += np.einsum(
                    "nfhw,fc->nchw", dy, params["W"][:, :, i, j], optimize=True
                )

        grads = dict(W=d_weight, b=dy.sum(axis=(0, 2, 3)))
        return d_padded[:, :, 1:-1, 1:-1], grads

    def config(self) -> dict:
        return dict(Filters=self.filters)

    @classmethod
    def from_config(cls, config) -> "Conv2D":
        return cls(filters=config.Filters)


@dataclasses.dataclass(frozen=True)
class MaxPool2D(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped, ties go to the first."""

    kind = LayerType.maxpool2d

    def output_shape(self, shape: Shape) -> Shape:
        _expect_rank(self, shape, 3, "(channels, height, width) maps")
        if shape[1] < 2 or shape[2] < 2:
            raise ValueError(f"Cannot pool a {shape[1]}x{shape[2]} map")
        return (shape[0], shape[1] // 2, shape[2] // 2)

    def forward(self, params, x, train, rng):
        batch, channels, height, width = x.shape
        rows, cols = height // 2, width // 2
        blocks = x[:, :, : 2 * rows, : 2 * cols].reshape(batch, channels, rows, 2, cols, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(batch, channels, rows, cols, 4)

        winner = np.argmax(blocks, axis=-1)
        y = np.take_along_axis(blocks, winner[..., np.newaxis], axis=-1)[..., 0]
        return y, dict(winner=winner, input_shape=x.shape)

    def backward(self, params, cache, dy):
        batch, channels, height, width = cache["input_shape"]
        rows, cols = dy.shape[2:]

        routed = np.zeros((batch, channels, rows, cols, 4), dtype=dy.dtype)
        np.put_along_axis(routed, cache["winner"][..., np.newaxis], dy[..., np.newaxis], axis=-1)
        routed = routed.reshape(batch, channels, rows, cols, 2, 2).transpose(0, 1, 2, 4, 3, 5)

        dx = np.zeros((batch, channels, height, width), dtype=dy.dtype)
        dx[:, :, : 2 * rows, : 2 * cols] = routed.reshape(batch, channels, 2 * rows, 2 * cols)
        return dx, {}


@dataclasses.dataclass(frozen=True)
class Flatten(Layer):
    kind = LayerType.flatten

    def output_shape(self, shape: Shape) -> Shape:
        return (int(np.prod(shape)),)

    def forward(self, params, x, train, rng):
        return x.reshape(x.shape[0], -1), dict(input_shape=x.shape)

    def backward(self, params, cache, dy):
        return dy.reshape(cache["input_shape"]), {}


@dataclasses.dataclass(frozen=True)
class Gru(Layer):
    units: int
    reverse: bool = False
    return_sequences: bool = False

    kind = LayerType.gru
    trainable = ("W", "U", "b")
    weights = ("W", "U")

    def output_shape(self, shape: Shape) -> Shape:
        _expect_rank(self, shape, 2, "(time, features) sequences")
        return (shape[0], self.units) if self.return_sequences else (self.units,)

    def param_shapes(self, shape: Shape) -> typing.Dict[str, Shape]:
        gates = 3 * self.units
        return dict(W=(shape[-1], gates), U=(self.units, gates), b=(gates,))

    def init_params(self, shape, rng, relu_follows=False) -> Params:
        gates = 3 * self.units
        return dict(
            W=glorot_uniform(rng, (shape[-1], gates), shape[-1], gates),
            U=glorot_uniform(rng, (self.units, gates), self.units, gates),
            b=np.zeros(gates),
        )

    def _final_step(self) -> int:
        return 0 if self.reverse else -1

    def forward(self, params, x, train, rng):
        states, caches = gru_sequence(x, params, self.reverse)
        y = states if self.return_sequences else states[:, self._final_step()]
        return y, dict(caches=caches, states_shape=states.shape)

    def backward(self, params, cache, dy):
        if self.return_sequences:
            d_states = dy
        else:
            d_states = np.zeros(cache["states_shape"], dtype=dy.dtype)
            d_states[:, self._final_step()] = dy
        return gru_sequence_backward(d_states, cache["caches"], params, self.reverse)

    def config(self) -> dict:
        return dict(Units=self.units, Reverse=self.reverse, ReturnSequences=self.return_sequences)

    @classmethod
    def from_config(cls, config) -> "Gru":
        return cls(
            units=config.Units, reverse=config.Reverse, return_sequences=config.ReturnSequences
        )


@dataclasses.dataclass(frozen=True)
class Bidirectional(Layer):
    """Forward and backward GRUs over the same input; outputs concatenate [forward, backward]."""

    units: int
    return_sequences: bool = False

    kind = LayerType.bidirectional
    trainable = ("fw_W", "fw_U", "fw_b", "bw_W", "bw_U", "bw_b")
    weights = ("fw_W", "fw_U", "bw_W", "bw_U")

    @property
    def directions(self) -> typing.Tuple[typing.Tuple[str, Gru], ...]:
        return (
            ("fw_", Gru(self.units, reverse=False, return_sequences=self.return_sequences)),
            ("bw_", Gru(self.units, reverse=True, return_sequences=self.return_sequences)),
        )

    @staticmethod
    def _split(params: Params, prefix: str) -> Params:
        return {
            name[len(prefix) :]: value for name, value in params.items() if name.startswith(prefix)
        }

    def output_shape(self, shape: Shape) -> Shape:
        _expect_rank(self, shape, 2, "(time, features) sequences")
        return (shape[0], 2 * self.units) if self.return_sequences else (2 * self.units,)

    def param_shapes(self, shape: Shape) -> typing.Dict[str, Shape]:
        return {
            prefix + name: size
            for prefix, direction in self.directions
            for name, size in direction.param_shapes(shape).items()
        }

    def init_params(self, shape, rng, relu_follows=False) -> Params:
        return {
            prefix + name: value
            for prefix, direction in self.directions
            for name, value in direction.init_params(shape, rng).items()
        }

    def forward(self, params, x, train, rng):
        outputs, caches = [], []
        for prefix, direction in self.directions:
            y, cache = direction.forward(self._split(params, prefix), x, train, rng)
            outputs.append(y)
            caches.append(cache)
        return np.concatenate(outputs, axis=-1), dict(caches=caches)

    def backward(self, params, cache, dy):
        dx = 0
        grads = {}
        halves = (dy[..., : self.units], dy[..., self.units :])
        for (prefix, direction), half, inner in zip(self.directions, halves, cache["caches"]):
            d_input, inner_grads = direction.backward(self._split(params, prefix), inner, half)
            dx = dx + d_input
            grads.update({prefix + name: value for name, value in inner_grads.items()})
        return dx, grads

    def config(self) -> dict:
        return dict(Units=self.units, ReturnSequences=self.return_sequences)

    @classmethod
    def from_config(cls, config) -> "Bidirectional":
        return cls(units=config.Units, return_sequences=config.ReturnSequences)
