"""
Network descriptors, forward/backward passes and the SKN1 model file.

Parameters are a list with one name -> array dict per layer. Batch-norm running statistics
sit next to the trainable tensors but never receive gradients; a train-mode forward pass
leaves the updated values in its cache and `commit_running_stats` writes them back.
"""

import enum
import typing
import logging
import pathlib
import construct
import dataclasses
import numpy as np
from scenekit.sugar import atomic_write, bites
from scenekit.static.model import NetworkFile, TrainSnapshot
from scenekit.neural.layers import BatchNorm, Dropout, Layer, ReLU, Shape, Softmax

NetParams = typing.List[typing.Dict[str, np.ndarray]]
NetGrads = typing.List[typing.Dict[str, np.ndarray]]


class ShapeError(Exception):
    def __init__(self, layer_index: int, message: str):
        super().__init__(f"Layer {layer_index}: {message}")
        self.layer_index = layer_index


class CacheError(Exception):
    ...


class NetworkFormatError(Exception):
    ...


class Mode(enum.Enum):
    train = "train"
    infer = "infer"


@dataclasses.dataclass(frozen=True)
class NetSpec:
    input_shape: Shape
    layers: typing.Tuple[Layer, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(size) for size in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

        if not self.layers or not isinstance(self.layers[-1], Softmax):
            raise ShapeError(len(self.layers) - 1, "a network must end with a softmax layer")
        for index, layer in enumerate(self.layers[:-1]):
            if isinstance(layer, Softmax):
                raise ShapeError(index, "softmax is only allowed as the final layer")

        self.shapes  # validates every transition

    @property
    def shapes(self) -> typing.List[Shape]:
        """Input shape of every layer followed by the output shape, batch axis excluded."""
        shapes = [self.input_shape]
        for index, layer in enumerate(self.layers):
            try:
                shapes.append(tuple(layer.output_shape(shapes[-1])))
            except ValueError as error:
                raise ShapeError(index, str(error)) from error
        return shapes

    @property
    def classes(self) -> int:
        return self.layers[-1].classes


@dataclasses.dataclass
class ForwardCache:
    spec: NetSpec
    mode: Mode
    layer_caches: typing.List[dict]
    consumed: bool = False


def _relu_follows(layers: typing.Sequence[Layer], index: int) -> bool:
    for layer in layers[index + 1 :]:
        if isinstance(layer, ReLU):
            return True
        if not isinstance(layer, (BatchNorm, Dropout)):
            return False
    return False


def init_params(spec: NetSpec, seed: int, dtype=np.float32) -> NetParams:
    rng = np.random.default_rng(seed)
    params = []
    for index, (layer, shape) in enumerate(zip(spec.layers, spec.shapes)):
        tensors = layer.init_params(shape, rng, relu_follows=_relu_follows(spec.layers, index))
        params.append({name: np.asarray(value, dtype=dtype) for name, value in tensors.items()})
    return params


def check_params(spec: NetSpec, params: NetParams) -> None:
    if len(params) != len(spec.layers):
        raise ShapeError(
            len(params), f"{len(params)} parameter sets for {len(spec.layers)} layers"
        )
    for index, (layer, shape, tensors) in enumerate(zip(spec.layers, spec.shapes, params)):
        for name, expected in layer.param_shapes(shape).items():
            if name not in tensors:
                raise ShapeError(index, f"missing parameter {name}")
            if tensors[name].shape != tuple(expected):
                raise ShapeError(
                    index, f"parameter {name} is {tensors[name].shape}, expected {expected}"
                )


def forward(
    spec: NetSpec,
    params: NetParams,
    batch: np.ndarray,
    mode: typing.Union[Mode, str] = Mode.infer,
    seed: typing.Optional[int] = None,
    check_finite: bool = False,
) -> typing.Tuple[np.ndarray, ForwardCache]:
    mode = Mode(mode)
    if tuple(batch.shape[1:]) != spec.input_shape:
        raise ShapeError(0, f"batch of {batch.shape[1:]} examples, expected {spec.input_shape}")
    if mode == Mode.train and seed is None:
        raise ValueError("Train-mode forward needs a seed for its dropout masks")
    check_params(spec, params)

    rng = np.random.default_rng(seed) if mode == Mode.train else None
    caches = []
    y = batch
    for index, (layer, tensors) in enumerate(zip(spec.layers, params)):
        y, cache = layer.forward(tensors, y, mode == Mode.train, rng)
        caches.append(cache)
        if check_finite and not np.all(np.isfinite(y)):
            name = type(layer).__name__
            raise FloatingPointError(f"Layer {index} ({name}) produced non-finite values")

    return y, ForwardCache(spec=spec, mode=mode, layer_caches=caches)


def backward(
    spec: NetSpec, params: NetParams, cache: ForwardCache, grad_out: np.ndarray
) -> NetGrads:
    """
    Gradients of every trainable tensor. grad_out is taken w.r.t. the softmax logits, as
    returned by `cross_entropy`. A cache can be consumed once.
    """
    if cache.consumed:
        raise CacheError("Forward cache was already used by a backward pass")
    if cache.spec != spec or len(cache.layer_caches) != len(spec.layers):
        raise CacheError("Forward cache belongs to a different network")
    cache.consumed = True

    grads: NetGrads = [{} for _ in spec.layers]
    dy = grad_out
    for index in reversed(range(len(spec.layers))):
        layer = spec.layers[index]
        dy, layer_grads = layer.backward(params[index], cache.layer_caches[index], dy)
        grads[index] = {name: layer_grads[name] for name in layer.trainable}
    return grads


def commit_running_stats(spec: NetSpec, params: NetParams, cache: ForwardCache) -> None:
    if cache.mode != Mode.train:
        return
    for layer, tensors, layer_cache in zip(spec.layers, params, cache.layer_caches):
        if isinstance(layer, BatchNorm):
            mean, var = layer_cache["running"]
            tensors["running_mean"][...] = mean
            tensors["running_var"][...] = np.maximum(var, 0)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> typing.Tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits, (probs - onehot) / N."""
    labels = np.asarray(labels, dtype=np.int64)
    count = probs.shape[0]
    picked = probs[np.arange(count), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(probs.dtype).tiny))))

    grad = probs.copy()
    grad[np.arange(count), labels] -= 1
    return loss, grad / count


def predict_proba(
    spec: NetSpec, params: NetParams, examples: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    if len(examples) == 0:
        return np.zeros((0, spec.classes))
    rows = [
        forward(spec, params, examples[list(chunk)], Mode.infer)[0]
        for chunk in bites(range(len(examples)), batch_size)
    ]
    return np.concatenate(rows, axis=0)


def count_params(spec: NetSpec) -> int:
    """Trainable scalars only; batch-norm running statistics are not counted."""
    total = 0
    for layer, shape in zip(spec.layers, spec.shapes):
        sizes = layer.param_shapes(shape)
        total += sum(int(np.prod(sizes[name])) for name in layer.trainable)
    return total


def numeric_gradient(
    loss: typing.Callable[[], float], array: np.ndarray, epsilon: float = 1e-5
) -> np.ndarray:
    """Central differences of loss() w.r.t. every entry of array, perturbed in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    for position in range(flat.size):
        saved = flat[position]
        flat[position] = saved + epsilon
        upper = loss()
        flat[position] = saved - epsilon
        lower = loss()
        flat[position] = saved
        grad.reshape(-1)[position] = (upper - lower) / (2 * epsilon)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def network_to_record(spec: NetSpec, params: NetParams, training: TrainSnapshot) -> dict:
    layers = []
    for layer, shape, tensors in zip(spec.layers, spec.shapes, params):
        layers.append(
            dict(
                Type=layer.kind,
                Config=layer.config(),
                Tensors=[(name, tensors[name]) for name in layer.param_shapes(shape)],
            )
        )
    return dict(InputShape=list(spec.input_shape), Layers=layers, Training=training)


def network_from_record(record) -> typing.Tuple[NetSpec, NetParams, TrainSnapshot]:
    layers = [Layer.by_kind[entry.Type].from_config(entry.Config) for entry in record.Layers]
    spec = NetSpec(input_shape=tuple(record.InputShape), layers=tuple(layers))
    params = [
        {name: np.asarray(array, dtype=np.float32) for name, array in entry.Tensors}
        for entry in record.Layers
    ]
    check_params(spec, params)
    return spec, params, record.Training


def encode_network(spec: NetSpec, params: NetParams, training: TrainSnapshot) -> bytes:
    return NetworkFile.build(dict(Network=network_to_record(spec, params, training)))


def decode_network(data: bytes) -> typing.Tuple[NetSpec, NetParams, TrainSnapshot]:
    try:
        record = NetworkFile.parse(data).Network
    except construct.ConstructError as error:
        raise NetworkFormatError(f"Not a readable network file: {error}") from error
    logging.debug(f"Decoded network with {len(record.Layers)} layers")
    return network_from_record(record)


def save_network(
    path: typing.Union[str, pathlib.Path],
    spec: NetSpec,
    params: NetParams,
    training: TrainSnapshot,
) -> None:
    atomic_write(path, encode_network(spec, params, training))


def load_network(
    path: typing.Union[str, pathlib.Path]
) -> typing.Tuple[NetSpec, NetParams, TrainSnapshot]:
    return decode_network(pathlib.Path(path).read_bytes())
