"""WAV decoding/encoding and the mono channel views used by the feature extractors."""

import enum
import typing
import logging
import pathlib
import construct
import dataclasses
import numpy as np
from scenekit.sugar import atomic_write
from scenekit.static.wave import (
    DATA_CHUNK,
    FORMAT_CHUNK,
    FORMAT_BODY_SIZE,
    ChunkHeaderStruct,
    PcmWaveFile,
    RiffHeaderStruct,
    WaveCodec,
    WaveFormat,
    WaveFormatStruct,
)

SUPPORTED_BITS: typing.Final = (16, 24)
SUPPORTED_CHANNELS: typing.Final = (1, 2)


class WavError(Exception):
    ...


class MalformedHeaderError(WavError):
    ...


class UnsupportedFormatError(WavError):
    ...


class TruncatedDataError(WavError):
    ...


class ChannelError(Exception):
    ...


class ChannelView(enum.Enum):
    left = "left"
    right = "right"
    mid = "mid"
    diff = "diff"


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # channels x length
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.ndim != 2 or samples.shape[0] not in SUPPORTED_CHANNELS:
            raise ValueError(f"Expected 1 or 2 equal-length channels, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"Sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)) or np.any(np.abs(samples) > 1.0):
            raise ValueError("Samples must be finite and within [-1.0, 1.0]")

        object.__setattr__(self, "samples", _frozen(samples))
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.length / self.sample_rate


@dataclasses.dataclass(frozen=True)
class MonoSignal:
    samples: np.ndarray
    sample_rate: int
    view: ChannelView = ChannelView.mid

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"Mono signal must be one-dimensional, got shape {samples.shape}")
        object.__setattr__(self, "samples", _frozen(samples))

    def __len__(self) -> int:
        return self.samples.shape[0]


def _pcm_to_float(body: bytes, bits: int, channels: int) -> np.ndarray:
    if bits == 16:
        values = np.frombuffer(body, dtype="<i2").astype(np.float64)
    else:
        raw = np.frombuffer(body, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        packed = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        values = ((packed ^ 0x800000) - 0x800000).astype(np.float64)

    return (values / float(1 << (bits - 1))).reshape(-1, channels).T


def _float_to_pcm(samples: np.ndarray, bits: int) -> bytes:
    full_scale = 1 << (bits - 1)
    quantized = np.clip(np.round(samples.T.ravel() * full_scale), -full_scale, full_scale - 1)
    quantized = quantized.astype(np.int32)

    if bits == 16:
        return quantized.astype("<i2").tobytes()

    unsigned = quantized & 0xFFFFFF
    return (
        np.stack([unsigned & 0xFF, (unsigned >> 8) & 0xFF, (unsigned >> 16) & 0xFF], axis=1)
        .astype(np.uint8)
        .tobytes()
    )


def _check_format(fmt: WaveFormat) -> None:
    if fmt.Codec != WaveCodec.Pcm:
        raise UnsupportedFormatError(f"Only integer PCM is supported, file uses {fmt.Codec.name}")
    if fmt.BitsPerSample not in SUPPORTED_BITS:
        raise UnsupportedFormatError(f"Unsupported bit depth {fmt.BitsPerSample}")
    if fmt.Channels not in SUPPORTED_CHANNELS:
        raise UnsupportedFormatError(f"Unsupported channel count {fmt.Channels}")
    if fmt.SampleRate <= 0:
        raise MalformedHeaderError(f"Invalid sample rate {fmt.SampleRate}")

    expected_align = fmt.Channels * fmt.BitsPerSample // 8
    if fmt.BlockAlign != expected_align:
        raise MalformedHeaderError(
            f"Block align {fmt.BlockAlign} does not match {fmt.Channels}x{fmt.BitsPerSample} bit"
        )


def decode_wav(data: bytes) -> AudioClip:
    try:
        RiffHeaderStruct.parse(data)
    except construct.ConstructError as error:
        raise MalformedHeaderError(f"Not a RIFF/WAVE container: {error}") from error

    fmt: typing.Optional[WaveFormat] = None
    body: typing.Optional[bytes] = None

    offset = 12
    while offset + 8 <= len(data) and (fmt is None or body is None):
        chunk = ChunkHeaderStruct.parse(data[offset : offset + 8])
        start = offset + 8
        end = start + chunk.Size

        if chunk.Id == DATA_CHUNK:
            if end > len(data):
                raise TruncatedDataError(
                    f"Data chunk declares {chunk.Size} bytes, only {len(data) - start} present"
                )
            body = data[start:end]

        elif chunk.Id == FORMAT_CHUNK:
            if chunk.Size < FORMAT_BODY_SIZE or end > len(data):
                raise MalformedHeaderError(f"Format chunk of {chunk.Size} bytes is unusable")
            try:
                fmt = WaveFormatStruct.parse(data[start : start + FORMAT_BODY_SIZE])
            except construct.ValidationError as error:
                raise UnsupportedFormatError(str(error)) from error

        else:
            logging.debug(f"Skipping chunk {chunk.Id!r} ({chunk.Size} bytes)")

        offset = end + chunk.Size % 2

    if fmt is None:
        raise MalformedHeaderError("Missing fmt chunk")
    if body is None:
        raise MalformedHeaderError("Missing data chunk")

    _check_format(fmt)

    if len(body) % fmt.BlockAlign:
        raise TruncatedDataError(
            f"Data chunk of {len(body)} bytes ends inside a {fmt.BlockAlign}-byte sample frame"
        )

    return AudioClip(
        samples=_pcm_to_float(body, fmt.BitsPerSample, fmt.Channels), sample_rate=fmt.SampleRate
    )


def encode_wav(clip: AudioClip, bits: int = 16) -> bytes:
    if bits not in SUPPORTED_BITS:
        raise UnsupportedFormatError(f"Unsupported bit depth {bits}")

    fmt = WaveFormat(
        Codec=WaveCodec.Pcm,
        Channels=clip.channels,
        SampleRate=clip.sample_rate,
        ByteRate=clip.sample_rate * clip.channels * bits // 8,
        BlockAlign=clip.channels * bits // 8,
        BitsPerSample=bits,
    )
    return PcmWaveFile.build(dict(Fmt=fmt, Data=_float_to_pcm(clip.samples, bits)))


def read_wav(path: typing.Union[str, pathlib.Path]) -> AudioClip:
    return decode_wav(pathlib.Path(path).read_bytes())


def write_wav(path: typing.Union[str, pathlib.Path], clip: AudioClip, bits: int = 16) -> None:
    atomic_write(path, encode_wav(clip, bits))


def channel_view(clip: AudioClip, view: typing.Union[ChannelView, str]) -> MonoSignal:
    view = ChannelView(view)

    if clip.channels == 1:
        if view != ChannelView.mid:
            raise ChannelError(f"View '{view.value}' needs a stereo clip, got a mono one")
        return MonoSignal(samples=clip.samples[0], sample_rate=clip.sample_rate, view=view)

    left, right = clip.samples
    samples = {
        ChannelView.left: left,
        ChannelView.right: right,
        ChannelView.mid: (left + right) / 2,
        ChannelView.diff: left - right,
    }[view]
    return MonoSignal(samples=samples, sample_rate=clip.sample_rate, view=view)
