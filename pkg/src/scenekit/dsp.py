"""
Framing, spectra, mel filterbanks, cepstra, deltas and standardization.

Everything here is a pure function of its inputs. Matrices are laid out frames x dims.
"""

import typing
import logging
import pathlib
import construct
import dataclasses
import numpy as np
import scipy.fft
import scipy.signal
from scenekit.sugar import atomic_write
from scenekit.audio_io import AudioClip, ChannelView, MonoSignal, channel_view
from scenekit.static.constants import FeatureConstants, FeatureKind
from scenekit.static.feature import (
    FeatureFile,
    FeatureFileStruct,
    META_SUFFIX,
    format_meta,
    parse_meta,
)

LOG_FLOOR: typing.Final = 1e-10
STD_FLOOR: typing.Final = 1e-8
MIN_HALF_WIDTH: typing.Final = 1.5  # FFT bins

MFCC_COEFFICIENTS: typing.Final = 23
MFCC_LAYOUTS: typing.Final = {
    "23-23-15": (23, 23, 15),
    "23-19-19": (23, 19, 19),
}


class FeatureError(Exception):
    ...


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    frame_period: float
    kind: FeatureKind

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise FeatureError(f"Frames must be a T x D matrix, got shape {frames.shape}")

        kind = FeatureKind(self.kind)
        expected = FeatureConstants.by_kind[kind].Dim
        if frames.shape[1] != expected:
            raise FeatureError(
                f"{kind.name} frames must be {expected}-dim, got {frames.shape[1]}-dim"
            )
        if not np.all(np.isfinite(frames)):
            raise FeatureError(f"{kind.name} frames contain non-finite values")

        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "frames", _frozen(frames))
        object.__setattr__(self, "frame_period", float(self.frame_period))

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclasses.dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # n_mels x n_bins
    sample_rate: int
    fmin: float
    fmax: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]


@dataclasses.dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise FeatureError(f"Mean {self.mean.shape} and std {self.std.shape} disagree")
        if np.any(self.std < STD_FLOOR):
            raise FeatureError(f"Standard deviations must be at least {STD_FLOOR}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return apply_standardizer(self, frames)


def _is_power_of_two(value: int) -> bool:
    return value > 0 and value & (value - 1) == 0


def frame_array(samples: np.ndarray, frame_len: int, hop_len: int) -> np.ndarray:
    """Unwindowed frames; the trailing partial frame is dropped."""
    if frame_len < 1 or hop_len < 1:
        raise FeatureError(f"Frame length {frame_len} and hop {hop_len} must be positive")
    if samples.shape[0] < frame_len:
        raise FeatureError(f"Signal of {samples.shape[0]} samples is shorter than one frame")
    return np.lib.stride_tricks.sliding_window_view(samples, frame_len)[::hop_len]


def frame_signal(
    signal: MonoSignal, win_len: float = 0.02, hop: float = 0.01, window: str = "hann"
) -> np.ndarray:
    frame_len = int(round(win_len * signal.sample_rate))
    hop_len = int(round(hop * signal.sample_rate))
    frames = frame_array(signal.samples, frame_len, hop_len)
    return frames * scipy.signal.get_window(window, frame_len)


def power_spectrum(frames: np.ndarray, n_fft: int = 1024) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if not _is_power_of_two(n_fft):
        raise FeatureError(f"FFT size {n_fft} is not a power of two")
    if frames.shape[-1] > n_fft:
        raise FeatureError(f"Frame of {frames.shape[-1]} samples does not fit FFT size {n_fft}")
    return np.abs(scipy.fft.rfft(frames, n=n_fft, axis=-1)) ** 2


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int, n_fft: int, sr: int, fmin: float = 0.0, fmax: typing.Optional[float] = None
) -> MelFilterbank:
    fmax = sr / 2 if fmax is None else fmax
    if n_mels < 1:
        raise FeatureError(f"Need at least one mel band, got {n_mels}")
    if not 0 <= fmin < fmax <= sr / 2:
        raise FeatureError(f"Invalid mel range [{fmin}, {fmax}] Hz for rate {sr}")
    if not _is_power_of_two(n_fft):
        raise FeatureError(f"FFT size {n_fft} is not a power of two")

    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    bins = scipy.fft.rfftfreq(n_fft, d=1.0 / sr)[None, :]

    # Every slope spans at least MIN_HALF_WIDTH bins, so bands narrower than the bin spacing
    # still reach a shared bin with both neighbours
    reach = MIN_HALF_WIDTH * sr / n_fft
    lower, upper = np.minimum(lower, center - reach), np.maximum(upper, center + reach)

    rising = (bins - lower) / (center - lower)
    falling = (upper - bins) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))

    weights.setflags(write=False)
    return MelFilterbank(weights=weights, sample_rate=sr, fmin=float(fmin), fmax=float(fmax))


def log_mel(power_frames: np.ndarray, fb: MelFilterbank) -> np.ndarray:
    power_frames = np.asarray(power_frames, dtype=np.float64)
    if power_frames.shape[-1] != fb.n_bins:
        raise FeatureError(f"Spectrum has {power_frames.shape[-1]} bins, filterbank {fb.n_bins}")
    return np.log(np.maximum(power_frames @ fb.weights.T, LOG_FLOOR))


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II as an n x n matrix acting on column vectors."""
    return scipy.fft.dct(np.eye(n), type=2, norm="ortho", axis=0)


def mfcc(log_mel_frames: np.ndarray, n_coeffs: int = MFCC_COEFFICIENTS) -> np.ndarray:
    log_mel_frames = np.asarray(log_mel_frames, dtype=np.float64)
    if log_mel_frames.shape[-1] < n_coeffs + 1:
        raise FeatureError(
            f"{n_coeffs} cepstra need at least {n_coeffs + 1} mel bands, "
            f"got {log_mel_frames.shape[-1]}"
        )
    cepstra = scipy.fft.dct(log_mel_frames, type=2, norm="ortho", axis=-1)
    return cepstra[..., 1 : n_coeffs + 1]


def deltas(seq: np.ndarray, half_window: int = 2) -> np.ndarray:
    if half_window < 1:
        raise FeatureError(f"Delta half window must be at least 1, got {half_window}")

    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 0 or seq.shape[0] < 1:
        raise FeatureError("Cannot take deltas of an empty sequence")

    # Regression runs along the first axis; any trailing axes ride along
    length = seq.shape[0]
    padding = [(half_window, half_window)] + [(0, 0)] * (seq.ndim - 1)
    padded = np.pad(seq, padding, mode="edge")
    result = np.zeros_like(seq)
    for n in range(1, half_window + 1):
        ahead = padded[half_window + n : half_window + n + length]
        behind = padded[half_window - n : half_window - n + length]
        result += n * (ahead - behind)

    return result / (2 * sum(n * n for n in range(1, half_window + 1)))


def _spectral_frames(
    signal: MonoSignal, win_len: float, hop: float, n_fft: int
) -> typing.Tuple[np.ndarray, float]:
    frames = frame_signal(signal, win_len, hop)
    period = int(round(hop * signal.sample_rate)) / signal.sample_rate
    return power_spectrum(frames, n_fft), period


def logmel_features(
    signal: MonoSignal,
    n_mels: int = 60,
    win_len: float = 0.02,
    hop: float = 0.01,
    n_fft: int = 1024,
    fmin: float = 0.0,
    fmax: typing.Optional[float] = None,
) -> FeatureSequence:
    kinds = {constants.MelBands: kind for kind, constants in FeatureConstants.by_kind.items()}
    if n_mels not in kinds:
        raise FeatureError(f"No log-mel feature kind with {n_mels} bands")

    power, period = _spectral_frames(signal, win_len, hop, n_fft)
    fb = mel_filterbank(n_mels, n_fft, signal.sample_rate, fmin, fmax)
    return FeatureSequence(frames=log_mel(power, fb), frame_period=period, kind=kinds[n_mels])


def mfcc_layout(layout: str) -> typing.Tuple[int, int, int]:
    try:
        return MFCC_LAYOUTS[layout]
    except KeyError:
        raise FeatureError(
            f"Unknown MFCC layout '{layout}', expected one of {', '.join(MFCC_LAYOUTS)}"
        ) from None


def mfcc61_frames(
    signal: MonoSignal,
    layout: str = "23-23-15",
    mel_bands: int = 40,
    win_len: float = 0.02,
    hop: float = 0.01,
    n_fft: int = 1024,
    half_window: int = 2,
    fmin: float = 0.0,
    fmax: typing.Optional[float] = None,
) -> typing.Tuple[np.ndarray, float]:
    n_static, n_delta, n_delta2 = mfcc_layout(layout)

    power, period = _spectral_frames(signal, win_len, hop, n_fft)
    fb = mel_filterbank(mel_bands, n_fft, signal.sample_rate, fmin, fmax)
    static = mfcc(log_mel(power, fb))
    delta = deltas(static, half_window)
    delta2 = deltas(delta, half_window)

    frames = np.hstack([static[:, :n_static], delta[:, :n_delta], delta2[:, :n_delta2]])
    return frames, period


def mfcc61(signal: MonoSignal, **kwargs) -> FeatureSequence:
    frames, period = mfcc61_frames(signal, **kwargs)
    return FeatureSequence(frames=frames, frame_period=period, kind=FeatureKind.mfcc61)


def bimfcc(clip: AudioClip, **kwargs) -> FeatureSequence:
    if clip.channels != 2:
        raise FeatureError(f"Binaural MFCC needs a stereo clip, got {clip.channels} channel(s)")

    blocks = []
    for view in (ChannelView.left, ChannelView.right, ChannelView.diff):
        frames, period = mfcc61_frames(channel_view(clip, view), **kwargs)
        blocks.append(frames)

    return FeatureSequence(
        frames=np.hstack(blocks), frame_period=period, kind=FeatureKind.bimfcc183
    )


def fit_standardizer(train_frames: np.ndarray) -> Standardizer:
    train_frames = np.asarray(train_frames, dtype=np.float64)
    if train_frames.ndim != 2 or train_frames.shape[0] < 2:
        raise FeatureError(f"Need at least two frames to standardize, got {train_frames.shape}")
    return Standardizer(
        mean=train_frames.mean(axis=0),
        std=np.maximum(train_frames.std(axis=0), STD_FLOOR),
    )


def apply_standardizer(s: Standardizer, frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != s.dim:
        raise FeatureError(f"Standardizer is {s.dim}-dim, frames are {frames.shape[-1]}-dim")
    return (frames - s.mean) / s.std


def meta_path(path: typing.Union[str, pathlib.Path]) -> pathlib.Path:
    return pathlib.Path(path).with_suffix(META_SUFFIX)


def encode_features(seq: FeatureSequence) -> bytes:
    return FeatureFileStruct.build(
        FeatureFile(FramePeriod=seq.frame_period, Kind=seq.kind, Frames=seq.frames)
    )


def decode_features(data: bytes) -> FeatureSequence:
    try:
        parsed = FeatureFileStruct.parse(data)
    except construct.ConstructError as error:
        raise FeatureError(f"Not a readable feature file: {error}") from error
    return FeatureSequence(
        frames=parsed.Frames.astype(np.float64),
        frame_period=parsed.FramePeriod,
        kind=parsed.Kind,
    )


def write_features(
    path: typing.Union[str, pathlib.Path], seq: FeatureSequence, meta: typing.Optional[dict] = None
) -> None:
    sidecar = dict(
        kind=seq.kind.name,
        dim=seq.dim,
        frames=len(seq),
        frame_period=repr(seq.frame_period),
    )
    sidecar.update(meta or {})

    atomic_write(path, encode_features(seq))
    atomic_write(meta_path(path), format_meta(sidecar))
    logging.debug(f"Wrote {len(seq)} {seq.kind.name} frames to {path}")


def read_features(path: typing.Union[str, pathlib.Path]) -> FeatureSequence:
    return decode_features(pathlib.Path(path).read_bytes())


def read_meta(path: typing.Union[str, pathlib.Path]) -> dict:
    sidecar = meta_path(path)
    if not sidecar.exists():
        return {}
    return parse_meta(sidecar.read_text(encoding="utf8"))
