"""
Reference architectures and the example shaping each of them consumes.

    dnn  4 x [Dense 256, BN, ReLU, Dropout 0.2], Softmax
    rnn  bidirectional GRU 256 pair, Dropout 0.4, BN, Softmax
    cnn  [32, 32, pool], [64, 64, pool], [128, 128, pool] 3x3 convs with BN + ReLU,
         Dropout 0.3 after each pool, Softmax

Dense blocks apply ReLU after batch norm.
"""

import typing
import numpy as np
from scenekit.static.constants import ModelKind
from scenekit.neural.net import NetSpec, ShapeError
from scenekit.neural.layers import (
    BatchNorm,
    Bidirectional,
    Conv2D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2D,
    ReLU,
    Softmax,
)

CLASSES: typing.Final = 15
SEGMENT_FRAMES: typing.Final = 100
CNN_FILTERS: typing.Final = (32, 64, 128)

# Searched hyper-parameter ranges; build_architecture accepts anything positive
DENSE_LAYER_RANGE: typing.Final = (2, 10)
DENSE_UNIT_RANGE: typing.Final = (256, 1024)
DROPOUT_RANGE: typing.Final = (0.0, 0.4)
RNN_UNIT_CHOICES: typing.Final = (256, 512)


def _dnn(input_shape, classes, dense_units, dense_layers, dense_dropout) -> list:
    if len(input_shape) != 1:
        raise ShapeError(0, f"dnn takes single feature vectors, got input shape {input_shape}")
    layers = []
    for _ in range(dense_layers):
        layers += [Dense(dense_units), BatchNorm(), ReLU(), Dropout(dense_dropout)]
    return layers + [Softmax(classes)]


def _rnn(input_shape, classes, rnn_units, rnn_stacked, rnn_dropout) -> list:
    if len(input_shape) != 2:
        raise ShapeError(0, f"rnn takes (frames, features) sequences, got {input_shape}")
    layers = []
    if rnn_stacked:
        layers.append(Bidirectional(rnn_units, return_sequences=True))
    layers.append(Bidirectional(rnn_units, return_sequences=False))
    return layers + [Dropout(rnn_dropout), BatchNorm(), Softmax(classes)]


def _cnn(input_shape, classes, cnn_dropout) -> list:
    if len(input_shape) == 2:
        input_shape = (1,) + tuple(input_shape)
    if len(input_shape) != 3:
        raise ShapeError(0, f"cnn takes 2-D feature maps, got input shape {input_shape}")
    layers = []
    for filters in CNN_FILTERS:
        for _ in range(2):
            layers += [Conv2D(filters), BatchNorm(), ReLU()]
        layers += [MaxPool2D(), Dropout(cnn_dropout)]
    return layers + [Flatten(), Softmax(classes)]


def build_architecture(
    kind: typing.Union[ModelKind, str],
    input_shape: typing.Sequence[int],
    classes: int = CLASSES,
    dense_units: int = 256,
    dense_layers: int = 4,
    dense_dropout: float = 0.2,
    rnn_units: int = 256,
    rnn_stacked: bool = False,
    rnn_dropout: float = 0.4,
    cnn_dropout: float = 0.3,
) -> NetSpec:
    """
    With rnn_stacked the two bidirectional GRU layers are stacked instead of forming a single
    forward/backward pair.
    """
    if isinstance(kind, str):
        kind = ModelKind[kind]
    input_shape = tuple(int(size) for size in input_shape)

    if kind == ModelKind.dnn:
        layers = _dnn(input_shape, classes, dense_units, dense_layers, dense_dropout)
    elif kind == ModelKind.rnn:
        layers = _rnn(input_shape, classes, rnn_units, rnn_stacked, rnn_dropout)
    elif kind == ModelKind.cnn:
        layers = _cnn(input_shape, classes, cnn_dropout)
        if len(input_shape) == 2:
            input_shape = (1,) + input_shape
    else:
        raise ValueError(f"{kind.name} is not a network architecture")

    return NetSpec(input_shape=input_shape, layers=tuple(layers))


def segment_sequence(frames: np.ndarray, length: int = SEGMENT_FRAMES) -> np.ndarray:
    """
    Non-overlapping (length, dim) segments of a (frames, dim) matrix. A trailing partial segment
    is dropped unless it is the only one, in which case it is padded by repeating the last frame.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("Cannot segment an empty frame matrix")
    if len(frames) < length:
        frames = np.pad(frames, ((0, length - len(frames)), (0, 0)), mode="edge")

    count = len(frames) // length
    return frames[: count * length].reshape(count, length, frames.shape[1])


def as_patches(frames: np.ndarray, length: int = SEGMENT_FRAMES) -> np.ndarray:
    """(frames, mel) log-mel frames -> (patches, 1, mel, length) channels-first maps."""
    segments = segment_sequence(frames, length)
    return np.swapaxes(segments, 1, 2)[:, np.newaxis]


def input_shape_for(
    kind: typing.Union[ModelKind, str], dim: int, length: int = SEGMENT_FRAMES
) -> typing.Tuple[int, ...]:
    if isinstance(kind, str):
        kind = ModelKind[kind]
    if kind == ModelKind.dnn:
        return (dim,)
    if kind == ModelKind.rnn:
        return (length, dim)
    return (1, dim, length)


def examples_for(
    kind: typing.Union[ModelKind, str], frames: np.ndarray, length: int = SEGMENT_FRAMES
) -> np.ndarray:
    """Training/scoring examples cut from one clip's standardized frame matrix."""
    if isinstance(kind, str):
        kind = ModelKind[kind]
    if kind == ModelKind.dnn:
        return np.asarray(frames)
    if kind == ModelKind.rnn:
        return segment_sequence(frames, length)
    return as_patches(frames, length)
