"""Gradient-descent optimizers and weight penalties. Updates are applied in place."""

import typing
import dataclasses
import numpy as np
from scenekit.static.model import OptimizerKind, RegularizerKind
from scenekit.neural.layers import Layer

NetParams = typing.List[typing.Dict[str, np.ndarray]]
NetGrads = typing.List[typing.Dict[str, np.ndarray]]
Slot = typing.Tuple[int, str]


@dataclasses.dataclass
class Optimizer:
    lr: float

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {self.lr}")
        self.state: typing.Dict[Slot, typing.Any] = {}

    def step(self, params: NetParams, grads: NetGrads) -> None:
        self.begin()
        for index, layer_grads in enumerate(grads):
            for name, grad in layer_grads.items():
                tensor = params[index][name]
                tensor -= self.update((index, name), grad).astype(tensor.dtype, copy=False)

    def begin(self) -> None:
        ...

    def update(self, slot: Slot, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclasses.dataclass
class Sgd(Optimizer):
    lr: float = 1e-2
    momentum: float = 0.9

    def update(self, slot, grad):
        velocity = self.momentum * self.state.get(slot, 0.0) + grad
        self.state[slot] = velocity
        return self.lr * velocity


@dataclasses.dataclass
class Adam(Optimizer):
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        super().__post_init__()
        self.t = 0

    def begin(self) -> None:
        self.t += 1

    def update(self, slot, grad):
        m, v = self.state.get(slot, (0.0, 0.0))
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * np.square(grad)
        self.state[slot] = (m, v)

        m_hat = m / (1 - self.beta1**self.t)
        v_hat = v / (1 - self.beta2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclasses.dataclass
class RmsProp(Optimizer):
    lr: float = 1e-3
    rho: float = 0.9
    eps: float = 1e-8

    def update(self, slot, grad):
        mean_square = self.rho * self.state.get(slot, 0.0) + (1 - self.rho) * np.square(grad)
        self.state[slot] = mean_square
        return self.lr * grad / (np.sqrt(mean_square) + self.eps)


@dataclasses.dataclass
class Adagrad(Optimizer):
    lr: float = 1e-2
    eps: float = 1e-8

    def update(self, slot, grad):
        accumulated = self.state.get(slot, 0.0) + np.square(grad)
        self.state[slot] = accumulated
        return self.lr * grad / (np.sqrt(accumulated) + self.eps)


OPTIMIZERS: typing.Final = {
    OptimizerKind.sgd: Sgd,
    OptimizerKind.adam: Adam,
    OptimizerKind.rmsprop: RmsProp,
    OptimizerKind.adagrad: Adagrad,
}


def make_optimizer(kind: typing.Union[OptimizerKind, str], lr: typing.Optional[float] = None):
    if isinstance(kind, str):
        kind = OptimizerKind[kind]
    if lr is None:
        return OPTIMIZERS[kind]()
    return OPTIMIZERS[kind](lr=lr)


def _penalized(layers: typing.Sequence[Layer], params: NetParams):
    for index, (layer, tensors) in enumerate(zip(layers, params)):
        for name in layer.weights:
            yield index, name, tensors[name]


def penalty(
    layers: typing.Sequence[Layer],
    params: NetParams,
    kind: typing.Union[RegularizerKind, str],
    coefficient: float,
) -> float:
    """Weight penalty over weight matrices and kernels; biases and batch-norm scales are exempt."""
    kind = RegularizerKind[kind] if isinstance(kind, str) else kind
    if kind == RegularizerKind.none or coefficient == 0:
        return 0.0

    total = 0.0
    for _, _, weight in _penalized(layers, params):
        if kind == RegularizerKind.l1:
            total += float(np.sum(np.abs(weight)))
        else:
            total += float(np.sum(np.square(weight, dtype=np.float64)))
    return coefficient * total


def penalty_grads(
    layers: typing.Sequence[Layer],
    params: NetParams,
    kind: typing.Union[RegularizerKind, str],
    coefficient: float,
) -> NetGrads:
    kind = RegularizerKind[kind] if isinstance(kind, str) else kind
    grads: NetGrads = [{} for _ in params]
    if kind == RegularizerKind.none or coefficient == 0:
        return grads

    for index, name, weight in _penalized(layers, params):
        if kind == RegularizerKind.l1:
            grads[index][name] = coefficient * np.sign(weight)
        else:
            grads[index][name] = 2 * coefficient * weight
    return grads
