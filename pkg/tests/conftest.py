import typing
import pathlib
import numpy as np
import pytest
from scenekit.audio_io import AudioClip
from scenekit.evaluation import Manifest
from scenekit.synth import SynthSpec, synthesize


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def make_tone() -> typing.Callable[..., AudioClip]:
    def tone(
        freq: float = 1000.0,
        sr: int = 16000,
        seconds: float = 1.0,
        channels: int = 1,
        amplitude: float = 0.5,
    ) -> AudioClip:
        t = np.arange(int(sr * seconds)) / sr
        left = amplitude * np.sin(2 * np.pi * freq * t)
        if channels == 1:
            return AudioClip(samples=left, sample_rate=sr)
        right = amplitude * np.sin(2 * np.pi * 1.5 * freq * t)
        return AudioClip(samples=np.stack([left, right]), sample_rate=sr)

    return tone


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory) -> typing.Tuple[pathlib.Path, Manifest]:
    """Three classes of eight one-second clips, shared by the slower end-to-end tests."""
    root = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(classes=3, clips_per_class=8, duration=1.0, sample_rate=16000, seed=3)
    return root, synthesize(spec, root)
