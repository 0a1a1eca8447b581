"""
Synthetic acoustic scenes for desk-scale runs.

Every class owns a tone mixture and a band of Butterworth-filtered noise. Clips of one class
share that recipe but draw their own phases, gains and noise, so classes stay separable
by spectral shape while no two clips are identical. Output depends only on the seed.
"""

import typing
import logging
import pathlib
import dataclasses
import numpy as np
import scipy.signal
from scenekit.sugar import atomic_write, derive_seed
from scenekit.audio_io import AudioClip, write_wav
from scenekit.evaluation import Manifest, format_manifest

SCENE_NAMES: typing.Final = (
    "beach",
    "bus",
    "cafe_restaurant",
    "car",
    "city_center",
    "forest_path",
    "grocery_store",
    "home",
    "library",
    "metro_station",
    "office",
    "park",
    "residential_area",
    "train",
    "tram",
)
MANIFEST_NAME: typing.Final = "manifest.txt"
TONES_PER_CLASS: typing.Final = 3
TONE_RANGE_HZ: typing.Final = (150.0, 3000.0)
PEAK: typing.Final = 0.9
FILTER_ORDER: typing.Final = 4


class SynthError(Exception):
    ...


@dataclasses.dataclass(frozen=True, kw_only=True)
class SynthSpec:
    classes: int = 5
    clips_per_class: int = 20
    duration: float = 5.0
    sample_rate: int = 16000
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise SynthError(f"Need at least two classes, got {self.classes}")
        if self.clips_per_class < 1:
            raise SynthError(f"Need at least one clip per class, got {self.clips_per_class}")
        if self.duration <= 0 or self.sample_rate < 8000:
            raise SynthError(
                f"Duration {self.duration} s at {self.sample_rate} Hz is not a usable clip"
            )
        if self.channels not in (1, 2):
            raise SynthError(f"Channels must be 1 or 2, got {self.channels}")


@dataclasses.dataclass(frozen=True)
class SceneRecipe:
    label: str
    tones: np.ndarray  # Hz
    noise_band: typing.Tuple[float, float]  # Hz
    tone_level: float
    delay: int  # right-channel lag in samples


def class_labels(count: int) -> typing.List[str]:
    if count <= len(SCENE_NAMES):
        return list(SCENE_NAMES[:count])
    return [f"scene{index:02d}" for index in range(count)]


def scene_recipe(label: str, sample_rate: int, seed: int) -> SceneRecipe:
    rng = np.random.default_rng(derive_seed(seed, "class", label))
    low, high = np.log(TONE_RANGE_HZ[0]), np.log(min(TONE_RANGE_HZ[1], 0.4 * sample_rate))
    tones = np.sort(np.exp(rng.uniform(low, high, TONES_PER_CLASS)))

    centre = np.exp(rng.uniform(np.log(200.0), np.log(0.3 * sample_rate)))
    width = rng.uniform(0.3, 1.0)
    band = (centre * 2 ** (-width), min(centre * 2**width, 0.45 * sample_rate))

    return SceneRecipe(
        label=label,
        tones=tones,
        noise_band=band,
        tone_level=float(rng.uniform(0.3, 0.7)),
        delay=int(rng.integers(1, 16)),
    )


def render_clip(recipe: SceneRecipe, spec: SynthSpec, index: int) -> AudioClip:
    rng = np.random.default_rng(derive_seed(spec.seed, "clip", recipe.label, index))
    length = int(round(spec.duration * spec.sample_rate))
    t = np.arange(length + recipe.delay) / spec.sample_rate

    phases = rng.uniform(0, 2 * np.pi, len(recipe.tones))
    gains = 10 ** (rng.uniform(-3, 3, len(recipe.tones)) / 20)
    angles = 2 * np.pi * recipe.tones[:, np.newaxis] * t + phases[:, np.newaxis]
    tones = (gains[:, np.newaxis] * np.sin(angles)).mean(axis=0)

    sos = scipy.signal.butter(
        FILTER_ORDER, recipe.noise_band, btype="bandpass", fs=spec.sample_rate, output="sos"
    )
    noise = scipy.signal.sosfilt(sos, rng.standard_normal(len(t)))
    noise /= max(np.std(noise), 1e-12)

    signal = recipe.tone_level * tones + (1 - recipe.tone_level) * 0.3 * noise
    if spec.channels == 1:
        samples = signal[np.newaxis, :length]
    else:
        right = signal[recipe.delay :] + 0.05 * rng.standard_normal(length)
        samples = np.stack([signal[:length], right])

    samples = PEAK * samples / max(np.max(np.abs(samples)), 1e-12)
    return AudioClip(samples=samples, sample_rate=spec.sample_rate)


def synthesize(spec: SynthSpec, output: typing.Union[str, pathlib.Path]) -> Manifest:
    """Write every clip as 16-bit WAV under output/audio and a manifest at output/manifest.txt."""
    output = pathlib.Path(output)
    try:
        (output / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise SynthError(f"Cannot create {output}: {error}") from error

    entries = []
    for label in class_labels(spec.classes):
        recipe = scene_recipe(label, spec.sample_rate, spec.seed)
        logging.info(f"Synthesizing {spec.clips_per_class} '{label}' clips")
        for index in range(spec.clips_per_class):
            relative = f"audio/{label}_{index:03d}.wav"
            write_wav(output / relative, render_clip(recipe, spec, index), bits=16)
            entries.append((relative, label))

    manifest = Manifest(entries=tuple(entries))
    atomic_write(output / MANIFEST_NAME, format_manifest(manifest))
    return manifest
