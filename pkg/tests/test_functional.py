import numpy as np
import pytest
from scenekit.dsp import FeatureError
from scenekit.static.constants import DescriptorSet, FeatureKind
from scenekit.functional import (
    DESCRIPTORS,
    FUNCTIONALS,
    apply_functionals,
    autocorrelation_pitch,
    descriptor_names,
    functional_features,
    zero_crossing_rate,
)


class TestDescriptors:
    def test_alternating_signal_crosses_every_sample(self):
        frames = np.tile([1.0, -1.0], 50)[np.newaxis]
        np.testing.assert_allclose(zero_crossing_rate(frames), [1.0])

    def test_pitch_of_a_pure_tone(self):
        sr = 16000
        t = np.arange(640) / sr
        frames = np.sin(2 * np.pi * 200.0 * t)[np.newaxis]
        np.testing.assert_allclose(autocorrelation_pitch(frames, sr), [200.0], rtol=0.02)

    def test_silence_is_unvoiced(self):
        np.testing.assert_array_equal(autocorrelation_pitch(np.zeros((2, 640)), 16000), 0.0)


class TestFunctionals:
    def test_linear_trend(self):
        lld = np.arange(10, dtype=np.float64).reshape(1, 10, 1)
        values = apply_functionals(lld)[0, 0]
        named = dict(zip(FUNCTIONALS, values))
        assert named["mean"] == pytest.approx(4.5)
        assert named["range"] == pytest.approx(9.0)
        assert named["slope"] == pytest.approx(1.0)
        assert named["p50"] == pytest.approx(4.5)
        assert named["skewness"] == pytest.approx(0.0, abs=1e-12)

    def test_single_frame_window(self):
        with pytest.raises(FeatureError):
            apply_functionals(np.zeros((1, 1, 3)))


class TestFunctionalFeatures:
    def test_compact_set(self, make_tone):
        seq = functional_features(make_tone(), window=0.1)
        assert seq.kind == FeatureKind.func983like
        assert seq.frames.shape == (10, len(DESCRIPTORS) * len(FUNCTIONALS))
        assert seq.frame_period == pytest.approx(0.1)

    def test_extended_set(self, make_tone):
        seq = functional_features(make_tone(), window=0.2, descriptor_set="extended")
        assert seq.kind == FeatureKind.func6klike
        assert seq.dim == len(descriptor_names(DescriptorSet.extended))

    def test_clip_shorter_than_window(self, make_tone):
        with pytest.raises(FeatureError):
            functional_features(make_tone(seconds=0.05), window=0.1)
