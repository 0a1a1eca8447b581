"""
Functional features: statistics of short-frame descriptors over longer, non-overlapping windows.

Each window is cut into short analysis frames, 30 low-level descriptors are computed per frame
and 11 functionals summarize every descriptor over the window. The extended set adds the first
and second order deltas of every descriptor before the functionals are applied.
"""

import typing
import numpy as np
import scipy.fft
import scipy.stats
import scipy.signal
from scenekit.audio_io import AudioClip, ChannelView, channel_view
from scenekit.static.constants import DescriptorSet, FeatureKind
from scenekit.dsp import (
    LOG_FLOOR,
    MFCC_COEFFICIENTS,
    FeatureError,
    FeatureSequence,
    deltas,
    frame_array,
    log_mel,
    mel_filterbank,
    mfcc,
    power_spectrum,
)

ROLLOFF_FRACTION: typing.Final = 0.85
PITCH_RANGE_HZ: typing.Final = (80.0, 1000.0)

DESCRIPTORS: typing.Final = (
    "log_energy",
    "zcr",
    "mcr",
    "pitch",
    "centroid",
    "rolloff",
    "flux",
    *(f"mfcc{index}" for index in range(1, MFCC_COEFFICIENTS + 1)),
)

FUNCTIONALS: typing.Final = (
    "mean",
    "std",
    "min",
    "max",
    "range",
    "skewness",
    "kurtosis",
    "p25",
    "p50",
    "p75",
    "slope",
)


def descriptor_names(descriptor_set: DescriptorSet = DescriptorSet.compact) -> typing.List[str]:
    """Column names in output order: descriptor-major, functional-minor."""
    descriptors = list(DESCRIPTORS)
    if descriptor_set == DescriptorSet.extended:
        descriptors += [f"{name}_d1" for name in DESCRIPTORS]
        descriptors += [f"{name}_d2" for name in DESCRIPTORS]
    return [f"{lld}__{functional}" for lld in descriptors for functional in FUNCTIONALS]


def zero_crossing_rate(frames: np.ndarray) -> np.ndarray:
    """Fraction of adjacent sample pairs that change sign."""
    signs = np.signbit(np.asarray(frames, dtype=np.float64))
    return np.mean(signs[..., 1:] != signs[..., :-1], axis=-1)


def mean_crossing_rate(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    return zero_crossing_rate(frames - frames.mean(axis=-1, keepdims=True))


def log_energy(frames: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(np.sum(np.square(frames), axis=-1), LOG_FLOOR))


def autocorrelation_pitch(
    frames: np.ndarray, sr: int, fmin: float = PITCH_RANGE_HZ[0], fmax: float = PITCH_RANGE_HZ[1]
) -> np.ndarray:
    """
    Frequency of the strongest autocorrelation peak with a lag between sr/fmax and sr/fmin.
    Unvoiced frames (no positive peak in range) report 0 Hz.
    """
    frames = np.asarray(frames, dtype=np.float64)
    frames = frames - frames.mean(axis=-1, keepdims=True)
    length = frames.shape[-1]

    n_fft = scipy.fft.next_fast_len(2 * length)
    spectrum = scipy.fft.rfft(frames, n=n_fft, axis=-1)
    correlation = scipy.fft.irfft(np.abs(spectrum) ** 2, n=n_fft, axis=-1)[..., :length]

    shortest = max(int(np.floor(sr / fmax)), 1)
    longest = min(int(np.ceil(sr / fmin)), length - 1)
    if longest <= shortest:
        return np.zeros(frames.shape[:-1])

    window = correlation[..., shortest : longest + 1]
    lags = shortest + np.argmax(window, axis=-1)
    peaks = np.take_along_axis(correlation, lags[..., np.newaxis], axis=-1)[..., 0]

    voiced = (peaks > 0) & (correlation[..., 0] > 0)
    return np.where(voiced, sr / lags, 0.0)


def _spectral_shape(power: np.ndarray, sr: int, n_fft: int) -> typing.Tuple[np.ndarray, ...]:
    freqs = scipy.fft.rfftfreq(n_fft, d=1.0 / sr)
    total = power.sum(axis=-1)
    safe_total = np.where(total > 0, total, 1.0)

    centroid = np.where(total > 0, (power @ freqs) / safe_total, 0.0)

    cumulative = np.cumsum(power, axis=-1)
    rolloff_bin = np.argmax(cumulative >= ROLLOFF_FRACTION * total[..., np.newaxis], axis=-1)
    rolloff = np.where(total > 0, freqs[rolloff_bin], 0.0)

    magnitude = np.sqrt(power)
    flux = np.zeros(power.shape[:-1])
    flux[..., 1:] = np.linalg.norm(np.diff(magnitude, axis=-2), axis=-1)

    return centroid, rolloff, flux


def low_level_descriptors(
    frames: np.ndarray, sr: int, n_fft: int = 1024, mel_bands: int = 40
) -> np.ndarray:
    """
    Descriptors for a (..., frames, samples) block, returned as (..., frames, 30).
    Flux compares consecutive frames along the second to last axis; the first frame reports 0.
    """
    windowed = frames * scipy.signal.get_window("hann", frames.shape[-1])
    power = power_spectrum(windowed, n_fft)
    centroid, rolloff, flux = _spectral_shape(power, sr, n_fft)
    cepstra = mfcc(log_mel(power, mel_filterbank(mel_bands, n_fft, sr)))

    scalars = np.stack(
        [
            log_energy(frames),
            zero_crossing_rate(frames),
            mean_crossing_rate(frames),
            autocorrelation_pitch(frames, sr),
            centroid,
            rolloff,
            flux,
        ],
        axis=-1,
    )
    return np.concatenate([scalars, cepstra], axis=-1)


def apply_functionals(lld: np.ndarray) -> np.ndarray:
    """(windows, frames, descriptors) -> (windows, descriptors, 11)."""
    count = lld.shape[1]
    if count < 2:
        raise FeatureError(f"Functionals need at least two frames per window, got {count}")

    minimum = lld.min(axis=1)
    maximum = lld.max(axis=1)
    mean = lld.mean(axis=1)

    ramp = np.arange(count) - (count - 1) / 2
    slope = np.einsum("f,wfd->wd", ramp, lld - mean[:, np.newaxis, :]) / np.sum(ramp**2)

    with np.errstate(all="ignore"):
        skewness = scipy.stats.skew(lld, axis=1)
        kurtosis = scipy.stats.kurtosis(lld, axis=1)

    p25, p50, p75 = np.percentile(lld, [25, 50, 75], axis=1)

    values = np.stack(
        [
            mean,
            lld.std(axis=1),
            minimum,
            maximum,
            maximum - minimum,
            np.nan_to_num(skewness, nan=0.0, posinf=0.0, neginf=0.0),
            np.nan_to_num(kurtosis, nan=0.0, posinf=0.0, neginf=0.0),
            p25,
            p50,
            p75,
            slope,
        ],
        axis=-1,
    )
    return values


def functional_features(
    clip: AudioClip,
    window: float = 0.1,
    descriptor_set: typing.Union[DescriptorSet, str] = DescriptorSet.compact,
    win_len: float = 0.02,
    hop: float = 0.01,
    n_fft: int = 1024,
    mel_bands: int = 40,
    view: typing.Union[ChannelView, str] = ChannelView.mid,
) -> FeatureSequence:
    if isinstance(descriptor_set, str):
        descriptor_set = DescriptorSet[descriptor_set]

    signal = channel_view(clip, view)
    sr = signal.sample_rate
    window_len = int(round(window * sr))
    frame_len = int(round(win_len * sr))
    hop_len = int(round(hop * sr))

    if len(signal) < window_len:
        raise FeatureError(
            f"Clip of {len(signal) / sr:.3f} s is shorter than one {window:.3f} s window"
        )
    if window_len < frame_len + hop_len:
        raise FeatureError(f"Window of {window} s holds fewer than two {win_len} s frames")

    windows = frame_array(signal.samples, window_len, window_len)
    frames = np.lib.stride_tricks.sliding_window_view(windows, frame_len, axis=-1)[:, ::hop_len]

    lld = low_level_descriptors(frames, sr, n_fft, mel_bands)
    if descriptor_set == DescriptorSet.extended:
        # deltas() regresses along axis 0, so put frames first
        by_frame = np.swapaxes(lld, 0, 1)
        delta = deltas(by_frame)
        delta2 = deltas(delta)
        lld = np.concatenate([lld, np.swapaxes(delta, 0, 1), np.swapaxes(delta2, 0, 1)], axis=-1)

    values = apply_functionals(lld)
    kind = FeatureKind.func983like
    if descriptor_set == DescriptorSet.extended:
        kind = FeatureKind.func6klike

    return FeatureSequence(
        frames=values.reshape(values.shape[0], -1),
        frame_period=window_len / sr,
        kind=kind,
    )
