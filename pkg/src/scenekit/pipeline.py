"""
Feature extraction by kind and uniform fit/score/save/load adapters for every model family.

A trained pipeline bundles the standardizer fitted on the training frames, the class list and
the family's model; it is stored in an SKP1 envelope around the family's own model body.
"""

import typing
import logging
import pathlib
import construct
import dataclasses
import numpy as np
from scenekit.sugar import atomic_write, derive_seed
from scenekit.audio_io import AudioClip, channel_view
from scenekit.config import FeatureConfig, ModelConfig
from scenekit.functional import functional_features
from scenekit.evaluation import Aggregation, ClipScore, aggregate_clip
from scenekit.dsp import (
    FeatureSequence,
    Standardizer,
    apply_standardizer,
    bimfcc,
    fit_standardizer,
    logmel_features,
    mfcc61,
)
from scenekit.gmm import (
    classifier_from_record,
    classifier_to_record,
    frame_log_likelihoods,
    train_classifier,
)
from scenekit.ivector import (
    ivector_classify,
    ivector_from_record,
    ivector_to_record,
    train_ivector_system,
)
from scenekit.neural import (
    NetSpec,
    TrainConfig,
    build_architecture,
    examples_for,
    init_params,
    input_shape_for,
    predict_proba,
    train,
)
from scenekit.neural.net import NetParams, network_from_record, network_to_record
from scenekit.static.constants import FeatureKind, ModelKind
from scenekit.static.model import (
    ModelFormatError,
    PIPELINE_MAGIC,
    PipelineFile,
    StandardizerRecord,
    TrainSnapshot,
    expect_magic,
)


class PipelineError(Exception):
    ...


def extract_features(clip: AudioClip, cfg: FeatureConfig) -> FeatureSequence:
    constants = cfg.constants
    spectral = dict(win_len=cfg.win_len, hop=cfg.hop, n_fft=cfg.n_fft, fmin=cfg.fmin, fmax=cfg.fmax)
    cepstral = dict(
        spectral, layout=cfg.mfcc_layout, mel_bands=cfg.mel_bands, half_window=cfg.half_window
    )

    if cfg.kind == FeatureKind.mfcc61:
        return mfcc61(channel_view(clip, cfg.view), **cepstral)
    if cfg.kind == FeatureKind.bimfcc183:
        return bimfcc(clip, **cepstral)
    if constants.MelBands is not None:
        return logmel_features(channel_view(clip, cfg.view), n_mels=constants.MelBands, **spectral)
    return functional_features(
        clip,
        window=cfg.functional_window,
        descriptor_set=constants.Descriptors,
        win_len=cfg.win_len,
        hop=cfg.hop,
        n_fft=cfg.n_fft,
        mel_bands=cfg.mel_bands,
        view=cfg.view,
    )


@dataclasses.dataclass(frozen=True)
class NetworkModel:
    spec: NetSpec
    params: NetParams
    training: TrainSnapshot


@dataclasses.dataclass(frozen=True, kw_only=True)
class TrainedPipeline:
    model_kind: ModelKind
    feature_kind: FeatureKind
    labels: typing.Tuple[str, ...]
    standardizer: Standardizer
    model: typing.Any
    cv_accuracy: float = 0.0
    segment_frames: int = 100

    @property
    def family(self) -> "ModelFamily":
        return ModelFamily.by_kind[self.model_kind]

    def clip_score(self, frames: np.ndarray) -> ClipScore:
        frames = np.asarray(frames)
        if frames.ndim != 2 or frames.shape[1] != self.standardizer.dim:
            raise PipelineError(
                f"Model expects {self.standardizer.dim}-dim {self.feature_kind.name} frames, "
                f"got shape {frames.shape}"
            )
        standardized = apply_standardizer(self.standardizer, frames)
        scores = self.family.segment_scores(self, standardized)
        return aggregate_clip(scores, self.family.aggregation)

    def predict_proba(self, frames: np.ndarray) -> np.ndarray:
        return self.clip_score(frames).probabilities()


class ModelFamily:
    kind: typing.ClassVar[ModelKind]
    aggregation: typing.ClassVar[Aggregation]

    by_kind: typing.ClassVar[typing.Dict[ModelKind, "ModelFamily"]] = {}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if "kind" in cls.__dict__:
            ModelFamily.by_kind[cls.kind] = cls()

    def fit(
        self,
        clips: typing.Sequence[np.ndarray],
        targets: typing.Sequence[str],
        labels: typing.Tuple[str, ...],
        cfg: ModelConfig,
        seed: int,
        jobs: int,
    ):
        raise NotImplementedError

    def segment_scores(self, pipeline: TrainedPipeline, frames: np.ndarray) -> np.ndarray:
        """(segments, classes) scores in pipeline.labels order."""
        raise NotImplementedError

    def to_body(self, model):
        raise NotImplementedError

    def from_body(self, record):
        raise NotImplementedError


class GmmFamily(ModelFamily):
    kind = ModelKind.gmm
    aggregation = Aggregation.sum_log

    def fit(self, clips, targets, labels, cfg, seed, jobs):
        bags = {
            label: np.vstack([frames for frames, target in zip(clips, targets) if target == label])
            for label in labels
        }
        return train_classifier(bags, cfg.mixture_components, cfg.em_iters, seed, labels, jobs)

    def segment_scores(self, pipeline, frames):
        models = pipeline.model.class_models
        return np.stack(
            [frame_log_likelihoods(models[label], frames) for label in pipeline.labels], axis=1
        )

    def to_body(self, model):
        return classifier_to_record(model)

    def from_body(self, record):
        return classifier_from_record(record)


class IVectorFamily(ModelFamily):
    """One i-vector per clip; its scaled class scores act as a single log-score segment."""

    kind = ModelKind.ivector
    aggregation = Aggregation.sum_log

    def fit(self, clips, targets, labels, cfg, seed, jobs):
        return train_ivector_system(
            clips,
            targets,
            components=cfg.mixture_components,
            rank=cfg.rank,
            ubm_iters=cfg.ubm_iters,
            t_iters=cfg.t_iters,
            seed=seed,
            scoring=cfg.scoring,
            length_norm=cfg.length_norm,
            score_scale=cfg.score_scale,
            jobs=jobs,
        )

    def segment_scores(self, pipeline, frames):
        model = pipeline.model
        scores = dict(zip(model.lda.labels, ivector_classify(model, frames)))
        return model.score_scale * np.array([[scores[label] for label in pipeline.labels]])

    def to_body(self, model):
        return ivector_to_record(model)

    def from_body(self, record):
        return ivector_from_record(record)


class NetworkFamily(ModelFamily):
    aggregation = Aggregation.mean_prob

    def build(self, dim: int, classes: int, cfg: ModelConfig) -> NetSpec:
        dropout = {}
        if cfg.dropout is not None:
            rate = cfg.dropout
            dropout = dict(dense_dropout=rate, rnn_dropout=rate, cnn_dropout=rate)
        return build_architecture(
            self.kind,
            input_shape_for(self.kind, dim, cfg.segment_frames),
            classes=classes,
            dense_units=cfg.dense_units,
            dense_layers=cfg.dense_layers,
            rnn_units=cfg.rnn_units,
            rnn_stacked=cfg.rnn_stacked,
            **dropout,
        )

    def _dataset(self, clips, targets, labels, length: int):
        index = {label: position for position, label in enumerate(labels)}
        examples, classes = [], []
        for frames, target in zip(clips, targets):
            clip_examples = examples_for(self.kind, frames, length)
            examples.append(clip_examples)
            classes.append(np.full(len(clip_examples), index[target]))
        return np.concatenate(examples).astype(np.float32), np.concatenate(classes)

    def fit(self, clips, targets, labels, cfg, seed, jobs):
        order = np.random.default_rng(derive_seed(seed, "validation")).permutation(len(clips))
        held_out = int(round(cfg.validation_fraction * len(clips)))
        held_out = min(held_out, len(clips) - 1)
        validation_ids, training_ids = order[:held_out], order[held_out:]

        dataset = self._dataset(
            [clips[i] for i in training_ids], [targets[i] for i in training_ids], labels,
            cfg.segment_frames,
        )
        validation = None
        if held_out > 0:
            validation = self._dataset(
                [clips[i] for i in validation_ids], [targets[i] for i in validation_ids], labels,
                cfg.segment_frames,
            )

        spec = self.build(clips[0].shape[1], len(labels), cfg)
        train_cfg = TrainConfig(
            optimizer=cfg.optimizer,
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            patience=cfg.patience,
            seed=derive_seed(seed, "train"),
            regularizer=cfg.regularizer,
            coefficient=cfg.coefficient,
        )
        logging.info(
            f"Training {self.kind.name} on {len(dataset[0])} examples "
            f"from {len(training_ids)} clips"
        )
        params, history = train(
            spec, init_params(spec, derive_seed(seed, "init")), dataset, train_cfg, validation
        )
        logging.debug(f"Best epoch {history.best_epoch} of {len(history.epochs)}")
        return NetworkModel(spec=spec, params=params, training=train_cfg.to_snapshot())

    def segment_scores(self, pipeline, frames):
        model = pipeline.model
        examples = examples_for(self.kind, frames, pipeline.segment_frames).astype(np.float32)
        return predict_proba(model.spec, model.params, examples)

    def to_body(self, model):
        return network_to_record(model.spec, model.params, model.training)

    def from_body(self, record):
        spec, params, training = network_from_record(record)
        return NetworkModel(spec=spec, params=params, training=training)


class DnnFamily(NetworkFamily):
    kind = ModelKind.dnn


class RnnFamily(NetworkFamily):
    kind = ModelKind.rnn


class CnnFamily(NetworkFamily):
    kind = ModelKind.cnn


def fit_pipeline(
    clips: typing.Sequence[np.ndarray],
    targets: typing.Sequence[str],
    feature_kind: typing.Union[FeatureKind, str],
    cfg: ModelConfig,
    labels: typing.Optional[typing.Sequence[str]] = None,
    seed: int = 0,
    jobs: int = 1,
) -> TrainedPipeline:
    """Standardizer and model, both fitted on the given training clips only."""
    if isinstance(feature_kind, str):
        feature_kind = FeatureKind[feature_kind]
    if not clips:
        raise PipelineError("No training clips")
    labels = tuple(sorted(set(targets)) if labels is None else labels)

    standardizer = fit_standardizer(np.vstack(clips))
    standardized = [apply_standardizer(standardizer, frames) for frames in clips]
    family = ModelFamily.by_kind[cfg.kind]
    model = family.fit(standardized, list(targets), labels, cfg, seed, jobs)

    return TrainedPipeline(
        model_kind=cfg.kind,
        feature_kind=feature_kind,
        labels=labels,
        standardizer=standardizer,
        model=model,
        segment_frames=cfg.segment_frames,
    )


@dataclasses.dataclass(frozen=True)
class PipelineTrainer:
    """Cross-validation adapter: fit_pipeline plus clip probabilities."""

    feature_kind: FeatureKind
    model: ModelConfig
    jobs: int = 1

    def fit(self, frames, labels, classes, seed) -> TrainedPipeline:
        return fit_pipeline(frames, labels, self.feature_kind, self.model, classes, seed, self.jobs)

    def score(self, fitted: TrainedPipeline, frames: np.ndarray) -> np.ndarray:
        return fitted.predict_proba(frames)


def encode_pipeline(pipeline: TrainedPipeline) -> bytes:
    return PipelineFile.build(
        dict(
            ModelKind=pipeline.model_kind,
            FeatureKind=pipeline.feature_kind,
            CvAccuracy=pipeline.cv_accuracy,
            SegmentFrames=pipeline.segment_frames,
            Labels=list(pipeline.labels),
            Standardizer=StandardizerRecord(
                Mean=pipeline.standardizer.mean, Std=pipeline.standardizer.std
            ),
            Body=pipeline.family.to_body(pipeline.model),
        )
    )


def decode_pipeline(data: bytes) -> TrainedPipeline:
    try:
        expect_magic(data, PIPELINE_MAGIC)
        record = PipelineFile.parse(data)
    except (ModelFormatError, construct.ConstructError) as error:
        raise PipelineError(f"Not a readable model file: {error}") from error

    family = ModelFamily.by_kind[record.ModelKind]
    return TrainedPipeline(
        model_kind=record.ModelKind,
        feature_kind=record.FeatureKind,
        labels=tuple(record.Labels),
        standardizer=Standardizer(mean=record.Standardizer.Mean, std=record.Standardizer.Std),
        model=family.from_body(record.Body),
        cv_accuracy=record.CvAccuracy,
        segment_frames=record.SegmentFrames,
    )


def save_pipeline(path: typing.Union[str, pathlib.Path], pipeline: TrainedPipeline) -> None:
    atomic_write(path, encode_pipeline(pipeline))


def load_pipeline(path: typing.Union[str, pathlib.Path]) -> TrainedPipeline:
    return decode_pipeline(pathlib.Path(path).read_bytes())
