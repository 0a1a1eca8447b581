import numpy as np
import pytest
from scenekit.config import FeatureConfig, ModelConfig
from scenekit.dsp import FeatureError
from scenekit.evaluation import cv_run, make_folds, Manifest
from scenekit.pipeline import (
    PipelineError,
    PipelineTrainer,
    TrainedPipeline,
    decode_pipeline,
    encode_pipeline,
    extract_features,
    fit_pipeline,
    load_pipeline,
    save_pipeline,
)
from scenekit.static.constants import FeatureKind, ModelKind

LABELS = ("bus", "park", "tram")


def scene_frames(rng, clips_per_class=6, frames=200, dim=6):
    clips, targets = [], []
    for position, label in enumerate(LABELS):
        centre = 3.0 * np.eye(dim)[position] + 10.0
        for _ in range(clips_per_class):
            clips.append(rng.normal(centre, 1.0, size=(frames, dim)))
            targets.append(label)
    return clips, targets


def training_accuracy(pipeline: TrainedPipeline, clips, targets) -> float:
    hits = [
        pipeline.labels[int(np.argmax(pipeline.predict_proba(frames)))] == target
        for frames, target in zip(clips, targets)
    ]
    return float(np.mean(hits))


class TestExtraction:
    @pytest.mark.parametrize(
        "kind, frames",
        [
            ("mfcc61", 99),
            ("logmel60", 99),
            ("logmel200", 99),
            ("func983like", 10),
            ("func6klike", 10),
        ],
    )
    def test_dimensions(self, kind, frames, make_tone):
        cfg = FeatureConfig(kind=kind)
        seq = extract_features(make_tone(), cfg)
        assert seq.frames.shape == (frames, cfg.dim)
        assert np.all(np.isfinite(seq.frames))

    def test_binaural_needs_stereo(self, make_tone):
        cfg = FeatureConfig(kind="bimfcc183")
        assert extract_features(make_tone(channels=2), cfg).frames.shape == (99, 183)
        with pytest.raises(FeatureError):
            extract_features(make_tone(channels=1), cfg)

    def test_channel_view(self, make_tone):
        clip = make_tone(channels=2)
        left = extract_features(clip, FeatureConfig(kind="mfcc61", view="left")).frames
        right = extract_features(clip, FeatureConfig(kind="mfcc61", view="right")).frames
        assert not np.allclose(left, right)


class TestGmmPipeline:
    @pytest.fixture(scope="class")
    def fitted(self):
        clips, targets = scene_frames(np.random.default_rng(0))
        cfg = ModelConfig(kind="gmm", components=2, em_iters=20)
        return fit_pipeline(clips, targets, "mfcc61", cfg, seed=1), clips, targets

    def test_classifies_training_clips(self, fitted):
        pipeline, clips, targets = fitted
        assert pipeline.labels == LABELS
        assert pipeline.model_kind == ModelKind.gmm
        assert training_accuracy(pipeline, clips, targets) == 1.0

    def test_probabilities(self, fitted):
        pipeline, clips, _ = fitted
        probs = pipeline.predict_proba(clips[0])
        assert probs.shape == (3,)
        assert probs.sum() == pytest.approx(1.0)

    def test_standardizer_comes_from_training_frames(self, fitted):
        pipeline, clips, _ = fitted
        np.testing.assert_allclose(pipeline.standardizer.mean, np.vstack(clips).mean(axis=0))

    def test_dimension_mismatch(self, fitted):
        pipeline, _, _ = fitted
        with pytest.raises(PipelineError, match="6-dim"):
            pipeline.predict_proba(np.zeros((10, 5)))

    def test_file_round_trip(self, fitted, tmp_path):
        pipeline, clips, _ = fitted
        save_pipeline(tmp_path / "gmm.skp", pipeline)
        loaded = load_pipeline(tmp_path / "gmm.skp")

        assert loaded.labels == pipeline.labels
        assert loaded.feature_kind == FeatureKind.mfcc61
        np.testing.assert_allclose(loaded.predict_proba(clips[3]), pipeline.predict_proba(clips[3]))
        assert encode_pipeline(loaded) == (tmp_path / "gmm.skp").read_bytes()

    def test_same_seed_same_bytes(self, fitted):
        pipeline, clips, targets = fitted
        cfg = ModelConfig(kind="gmm", components=2, em_iters=20)
        again = fit_pipeline(clips, targets, "mfcc61", cfg, seed=1)
        assert encode_pipeline(again) == encode_pipeline(pipeline)

    def test_label_order_is_respected(self, fitted):
        _, clips, targets = fitted
        cfg = ModelConfig(kind="gmm", components=2, em_iters=20)
        reversed_labels = tuple(reversed(LABELS))
        pipeline = fit_pipeline(clips, targets, "mfcc61", cfg, labels=reversed_labels, seed=1)
        assert pipeline.labels == reversed_labels
        assert reversed_labels[int(np.argmax(pipeline.predict_proba(clips[0])))] == "bus"


class TestIVectorPipeline:
    def test_fit_predict_and_reload(self, rng):
        clips, targets = scene_frames(rng, frames=150, dim=4)
        cfg = ModelConfig(kind="ivector", components=4, rank=3, ubm_iters=5, t_iters=3)
        pipeline = fit_pipeline(clips, targets, "mfcc61", cfg, seed=2)

        probs = pipeline.predict_proba(clips[0])
        assert probs.shape == (3,)
        assert probs.sum() == pytest.approx(1.0)

        loaded = decode_pipeline(encode_pipeline(pipeline))
        np.testing.assert_allclose(loaded.predict_proba(clips[0]), probs)


class TestNetworkPipelines:
    def test_dnn_learns_frames(self, rng):
        clips, targets = scene_frames(rng)
        cfg = ModelConfig(
            kind="dnn", dense_units=16, dense_layers=2, dropout=0.0, epochs=5, lr=1e-2, patience=0
        )
        pipeline = fit_pipeline(clips, targets, "mfcc61", cfg, seed=3)
        assert training_accuracy(pipeline, clips, targets) >= 0.9

        loaded = decode_pipeline(encode_pipeline(pipeline))
        np.testing.assert_allclose(
            loaded.predict_proba(clips[0]), pipeline.predict_proba(clips[0]), rtol=1e-5
        )

    def test_rnn_scores_segments(self, rng):
        clips, targets = scene_frames(rng, clips_per_class=3, frames=40, dim=5)
        cfg = ModelConfig(kind="rnn", rnn_units=4, segment_frames=20, epochs=1, batch_size=8)
        pipeline = fit_pipeline(clips, targets, "mfcc61", cfg, seed=4)

        assert pipeline.segment_frames == 20
        assert pipeline.family.segment_scores(pipeline, clips[0]).shape == (2, 3)
        assert pipeline.predict_proba(clips[0]).sum() == pytest.approx(1.0, abs=1e-5)

        loaded = decode_pipeline(encode_pipeline(pipeline))
        assert loaded.segment_frames == 20
        assert loaded.model.spec == pipeline.model.spec

    def test_cnn_on_spectrogram_patches(self, rng):
        clips, targets = scene_frames(rng, clips_per_class=2, frames=16, dim=8)
        cfg = ModelConfig(kind="cnn", segment_frames=8, epochs=1, batch_size=4)
        pipeline = fit_pipeline(clips, targets, "logmel60", cfg, seed=5)

        assert pipeline.model.spec.input_shape == (1, 8, 8)
        assert pipeline.predict_proba(clips[0]).shape == (3,)


class TestCrossValidation:
    def test_gmm_trainer_in_folds(self, rng):
        clips, targets = scene_frames(rng, clips_per_class=4, frames=100, dim=4)
        entries = tuple((f"clip{index}", target) for index, target in enumerate(targets))
        manifest = Manifest(entries=entries)
        features = dict(zip(manifest.paths, clips))

        trainer = PipelineTrainer(FeatureKind.mfcc61, ModelConfig(components=2, em_iters=10))
        report = cv_run(manifest, make_folds(manifest, 2, 0), trainer, features, seed=0, jobs=2)

        assert report.mean == 1.0
        assert all(fold.model.labels == LABELS for fold in report.folds)


class TestModelFile:
    def test_garbage(self):
        with pytest.raises(PipelineError):
            decode_pipeline(b"SKN1 but not a pipeline")

    def test_truncated(self, rng):
        clips, targets = scene_frames(rng, clips_per_class=2, frames=50, dim=3)
        pipeline = fit_pipeline(clips, targets, "mfcc61", ModelConfig(components=1, em_iters=5))
        data = encode_pipeline(pipeline)
        with pytest.raises(PipelineError):
            decode_pipeline(data[: len(data) // 2])

    def test_no_clips(self):
        with pytest.raises(PipelineError):
            fit_pipeline([], [], "mfcc61", ModelConfig())
