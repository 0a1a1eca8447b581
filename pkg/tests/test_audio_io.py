import numpy as np
import pytest
from scenekit.audio_io import (
    AudioClip,
    ChannelError,
    ChannelView,
    MalformedHeaderError,
    TruncatedDataError,
    UnsupportedFormatError,
    channel_view,
    decode_wav,
    encode_wav,
    read_wav,
    write_wav,
)
from scenekit.static.wave import PcmWaveFile, WaveCodec, WaveFormat


class TestWavRoundTrip:
    @pytest.mark.parametrize("bits", [16, 24])
    def test_within_one_quantization_step(self, rng, bits):
        samples = rng.uniform(-0.99, 0.99, size=(2, 4000))
        clip = AudioClip(samples=samples, sample_rate=22050)

        decoded = decode_wav(encode_wav(clip, bits))

        assert decoded.sample_rate == 22050
        assert decoded.samples.shape == (2, 4000)
        np.testing.assert_array_less(np.abs(decoded.samples - samples), 1.0 / (1 << (bits - 1)))

    def test_reencoding_is_exact(self, rng):
        clip = AudioClip(samples=rng.uniform(-0.5, 0.5, 1000), sample_rate=8000)
        once = encode_wav(clip, 24)
        assert encode_wav(decode_wav(once), 24) == once

    def test_file_round_trip(self, tmp_path, make_tone):
        clip = make_tone(seconds=0.25)
        write_wav(tmp_path / "tone.wav", clip)
        assert read_wav(tmp_path / "tone.wav").length == clip.length

    def test_unknown_chunks_are_skipped(self, make_tone):
        data = encode_wav(make_tone(seconds=0.1))
        padded = data[:36] + b"LIST" + (4).to_bytes(4, "little") + b"abcd" + data[36:]
        np.testing.assert_array_equal(decode_wav(padded).samples, decode_wav(data).samples)


class TestWavErrors:
    def test_not_a_riff_file(self):
        with pytest.raises(MalformedHeaderError):
            decode_wav(b"not a wave file at all")

    def test_truncated_data(self, make_tone):
        data = encode_wav(make_tone(seconds=0.1))
        with pytest.raises(TruncatedDataError):
            decode_wav(data[:-10])

    def test_float_codec_is_unsupported(self):
        fmt = WaveFormat(
            Codec=WaveCodec.IeeeFloat,
            Channels=1,
            SampleRate=8000,
            ByteRate=16000,
            BlockAlign=2,
            BitsPerSample=16,
        )
        with pytest.raises(UnsupportedFormatError):
            decode_wav(PcmWaveFile.build(dict(Fmt=fmt, Data=bytes(8))))

    def test_unsupported_bit_depth_on_encode(self, make_tone):
        with pytest.raises(UnsupportedFormatError):
            encode_wav(make_tone(seconds=0.1), bits=8)

    def test_samples_out_of_range(self):
        with pytest.raises(ValueError):
            AudioClip(samples=np.array([0.0, 1.5]), sample_rate=8000)


class TestChannelViews:
    def test_stereo_views(self, rng):
        samples = rng.uniform(-0.4, 0.4, size=(2, 100))
        clip = AudioClip(samples=samples, sample_rate=8000)

        np.testing.assert_allclose(channel_view(clip, "left").samples, samples[0])
        np.testing.assert_allclose(channel_view(clip, "right").samples, samples[1])
        np.testing.assert_allclose(channel_view(clip, "mid").samples, samples.mean(axis=0))
        np.testing.assert_allclose(
            channel_view(clip, ChannelView.diff).samples, samples[0] - samples[1]
        )

    def test_mono_clip_only_has_mid(self, make_tone):
        clip = make_tone(seconds=0.1)
        assert len(channel_view(clip, "mid")) == clip.length
        with pytest.raises(ChannelError):
            channel_view(clip, "diff")
