"""
Model introspection: spectra of first-layer weights, Savitzky-Golay smoothing, recurrent
activation traces and raw feature blocks, all exported as delimiter-separated numeric grids.
"""

import io
import typing
import pathlib
import numpy as np
import scipy.fft
import scipy.signal
from scenekit.sugar import atomic_write
from scenekit.neural.gru import gru_sequence
from scenekit.neural.net import NetParams, NetSpec
from scenekit.neural.layers import Bidirectional, Conv2D, Dense, Gru

DEFAULT_SAVGOL_WINDOW: typing.Final = 9
DEFAULT_SAVGOL_ORDER: typing.Final = 3
CONV_FFT_SIZE: typing.Final = 64


class DiagnosticsError(Exception):
    ...


def weight_spectrum(weight_matrix: np.ndarray) -> np.ndarray:
    """units x D weights -> units x (D // 2 + 1) half-spectrum magnitudes, row by row."""
    weight_matrix = np.asarray(weight_matrix, dtype=np.float64)
    if weight_matrix.ndim != 2 or weight_matrix.shape[1] < 2:
        raise ValueError(f"Expected a units x D matrix with D >= 2, got {weight_matrix.shape}")
    return np.abs(scipy.fft.rfft(weight_matrix, axis=1))


def _layer_index(spec: NetSpec, kind, layer: typing.Optional[int]) -> int:
    if layer is None:
        for index, candidate in enumerate(spec.layers):
            if isinstance(candidate, kind):
                return index
        raise DiagnosticsError(f"Network has no {kind.__name__} layer")
    if not 0 <= layer < len(spec.layers) or not isinstance(spec.layers[layer], kind):
        raise DiagnosticsError(f"Layer {layer} is not a {kind.__name__} layer")
    return layer


def dense_weight_spectrum(
    spec: NetSpec, params: NetParams, layer: typing.Optional[int] = None
) -> np.ndarray:
    """Spectra of the input weights of each unit of a dense layer, first one by default."""
    index = _layer_index(spec, Dense, layer)
    return weight_spectrum(params[index]["W"].T)


def conv_filter_spectrum(
    spec: NetSpec,
    params: NetParams,
    layer: typing.Optional[int] = None,
    n_fft: int = CONV_FFT_SIZE,
) -> np.ndarray:
    """
    Frequency response of each convolution filter along the mel axis: the kernel columns are
    zero-padded to n_fft, transformed and averaged over input channels and time taps.
    """
    index = _layer_index(spec, Conv2D, layer)
    kernels = np.asarray(params[index]["W"], dtype=np.float64)  # F, C, mel, time
    if n_fft < kernels.shape[2]:
        raise ValueError(f"FFT size {n_fft} is shorter than the {kernels.shape[2]}-tap kernel")
    return np.abs(scipy.fft.rfft(kernels, n=n_fft, axis=2)).mean(axis=(1, 3))


def _check_savgol(window: int, order: int) -> None:
    if window < 1 or window % 2 == 0:
        raise DiagnosticsError(f"Savitzky-Golay window must be odd and positive, got {window}")
    if not 0 <= order < window:
        raise DiagnosticsError(f"Polynomial order {order} must be in [0, {window})")


def savgol_kernel(
    window: int = DEFAULT_SAVGOL_WINDOW, order: int = DEFAULT_SAVGOL_ORDER
) -> np.ndarray:
    _check_savgol(window, order)
    return scipy.signal.savgol_coeffs(window, order)


def savgol_smooth(
    v: np.ndarray, window: int = DEFAULT_SAVGOL_WINDOW, order: int = DEFAULT_SAVGOL_ORDER
) -> np.ndarray:
    """Least-squares polynomial smoothing along the last axis with mirrored edges."""
    _check_savgol(window, order)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < window:
        raise DiagnosticsError(f"Vector of length {v.shape[-1]} is shorter than window {window}")
    return scipy.signal.savgol_filter(v, window, order, mode="mirror", axis=-1)


def activation_trace(
    spec: NetSpec,
    params: NetParams,
    sequence: np.ndarray,
    layer: typing.Optional[int] = None,
) -> np.ndarray:
    """
    Hidden states of the forward direction of a recurrent layer at every input step, for one
    (T, D) sequence. Earlier layers run in inference mode.
    """
    recurrent = [
        index
        for index, candidate in enumerate(spec.layers)
        if isinstance(candidate, (Gru, Bidirectional))
    ]
    if layer is None:
        if not recurrent:
            raise DiagnosticsError("Network has no recurrent layer")
        layer = recurrent[0]
    if layer not in recurrent:
        raise DiagnosticsError(f"Layer {layer} is not recurrent")

    x = np.asarray(sequence, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"Expected a (time, features) sequence, got shape {x.shape}")
    x = x[np.newaxis]
    for below, tensors in zip(spec.layers[:layer], params[:layer]):
        x, _ = below.forward(tensors, x, False, None)

    target = spec.layers[layer]
    tensors = params[layer]
    if isinstance(target, Bidirectional):
        tensors = Bidirectional._split(tensors, "fw_")
    tensors = {name: np.asarray(value, dtype=np.float64) for name, value in tensors.items()}
    reverse = isinstance(target, Gru) and target.reverse

    states, _ = gru_sequence(x, tensors, reverse)
    return states[0]


def feature_grid(frames: np.ndarray, start: int = 0, count: int = 100) -> np.ndarray:
    """A dim x count block of input features, frame axis last, ready to draw as an image."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ValueError(f"Expected a (frames, dim) matrix, got shape {frames.shape}")
    if start < 0 or count < 1 or start + count > len(frames):
        raise DiagnosticsError(
            f"Frames {start}..{start + count} are outside a {len(frames)}-frame sequence"
        )
    return frames[start : start + count].T


def format_grid(grid: np.ndarray, delimiter: str = ",") -> str:
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if grid.ndim != 2:
        raise ValueError(f"Only 2-D grids can be exported, got shape {grid.shape}")
    buffer = io.StringIO()
    np.savetxt(buffer, grid, fmt="%.17g", delimiter=delimiter)
    return buffer.getvalue()


def parse_grid(text: str, delimiter: str = ",") -> np.ndarray:
    return np.atleast_2d(np.loadtxt(io.StringIO(text), delimiter=delimiter, ndmin=2))


def write_grid(
    path: typing.Union[str, pathlib.Path], grid: np.ndarray, delimiter: str = ","
) -> None:
    atomic_write(path, format_grid(grid, delimiter))
