"""
Run configuration: a YAML tree with `features`, `model` and `folds` sections plus top-level
`seed`, `jobs` and `data_root`. Every key is optional; command-line flags override file values.

    features:
      kind: logmel60
      win_len: 0.02
    model:
      kind: dnn
      dropout: 0.2
      optimizer: adam
    folds:
      k: 4
    seed: 7
"""

import os
import typing
import hashlib
import logging
import pathlib
import dataclasses
import yaml
from scenekit.sugar import or_strict
from scenekit.audio_io import ChannelView
from scenekit.dsp import MFCC_LAYOUTS
from scenekit.ivector import DEFAULT_SCORE_SCALE
from scenekit.neural.layers import MAX_DROPOUT
from scenekit.neural.architectures import (
    DENSE_LAYER_RANGE,
    DENSE_UNIT_RANGE,
    DROPOUT_RANGE,
    SEGMENT_FRAMES,
)
from scenekit.static.constants import FeatureConstants, FeatureKind, ModelKind
from scenekit.static.model import IVectorScoring, OptimizerKind, RegularizerKind

DATA_ROOT_VARIABLE: typing.Final = "SCENEKIT_DATA_ROOT"


class ConfigError(Exception):
    ...


def _enum(enum_type, value, field: str):
    if isinstance(value, enum_type):
        return value
    try:
        return enum_type[value]
    except KeyError:
        known = ", ".join(member.name for member in enum_type)
        raise ConfigError(f"{field}: unknown value {value!r}, expected one of {known}") from None


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def _plain(value):
    if isinstance(value, (FeatureKind, ModelKind, OptimizerKind, RegularizerKind)):
        return value.name
    if isinstance(value, (ChannelView, IVectorScoring)):
        return value.name
    return value


class _Section:
    """Shared (de)serialization for the frozen config sections."""

    @classmethod
    def from_dict(cls, values: typing.Optional[dict], section: str):
        values = dict(values or {})
        names = {field.name for field in dataclasses.fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"{section}: unknown keys {', '.join(unknown)}")
        try:
            return cls(**values)
        except TypeError as error:
            raise ConfigError(f"{section}: {error}") from error

    def to_dict(self) -> dict:
        return {
            field.name: _plain(getattr(self, field.name)) for field in dataclasses.fields(self)
        }

    def replace(self, **overrides):
        """Copy with every non-None override applied."""
        current = {field.name: getattr(self, field.name) for field in dataclasses.fields(self)}
        merged = {name: or_strict(overrides.get(name), value) for name, value in current.items()}
        return type(self)(**merged)

    def config_hash(self) -> str:
        dump = yaml.safe_dump(self.to_dict(), sort_keys=True)
        return hashlib.sha1(dump.encode("utf8")).hexdigest()


@dataclasses.dataclass(frozen=True, kw_only=True)
class FeatureConfig(_Section):
    kind: FeatureKind = FeatureKind.logmel60
    win_len: float = 0.02
    hop: float = 0.01
    n_fft: int = 1024
    mel_bands: int = 40  # filterbank under the MFCC kinds
    mfcc_layout: str = "23-23-15"
    half_window: int = 2
    fmin: float = 0.0
    fmax: typing.Optional[float] = None
    functional_window: float = 0.1
    view: ChannelView = ChannelView.mid

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(FeatureKind, self.kind, "features.kind"))
        object.__setattr__(self, "view", _enum(ChannelView, self.view, "features.view"))

        _require(self.win_len > 0, f"features.win_len must be positive, got {self.win_len}")
        _require(self.hop > 0, f"features.hop must be positive, got {self.hop}")
        _require(
            self.n_fft > 0 and self.n_fft & (self.n_fft - 1) == 0,
            f"features.n_fft must be a power of two, got {self.n_fft}",
        )
        _require(self.mel_bands > 0, f"features.mel_bands must be positive, got {self.mel_bands}")
        _require(
            self.mfcc_layout in MFCC_LAYOUTS,
            f"features.mfcc_layout must be one of {', '.join(MFCC_LAYOUTS)}",
        )
        _require(self.half_window >= 1, "features.half_window must be at least 1")
        _require(self.fmin >= 0, f"features.fmin cannot be negative, got {self.fmin}")
        _require(
            self.fmax is None or self.fmax > self.fmin,
            f"features.fmax {self.fmax} must exceed fmin {self.fmin}",
        )
        _require(self.functional_window > 0, "features.functional_window must be positive")

    @property
    def constants(self) -> FeatureConstants:
        return FeatureConstants.by_kind[self.kind]

    @property
    def dim(self) -> int:
        return self.constants.Dim


@dataclasses.dataclass(frozen=True, kw_only=True)
class ModelConfig(_Section):
    kind: ModelKind = ModelKind.gmm

    # gmm, and the ivector background model; None: 16 for gmm, 256 for ivector
    components: typing.Optional[int] = None
    em_iters: int = 100

    # ivector
    rank: int = 400
    ubm_iters: int = 20
    t_iters: int = 10
    scoring: IVectorScoring = IVectorScoring.cosine
    length_norm: bool = False
    score_scale: float = DEFAULT_SCORE_SCALE

    # networks
    dense_units: int = 256
    dense_layers: int = 4
    rnn_units: int = 256
    rnn_stacked: bool = False
    dropout: typing.Optional[float] = None  # None: the architecture's own rate
    segment_frames: int = SEGMENT_FRAMES
    optimizer: OptimizerKind = OptimizerKind.adam
    lr: typing.Optional[float] = None
    batch_size: int = 64
    epochs: int = 30
    patience: int = 5
    regularizer: RegularizerKind = RegularizerKind.none
    coefficient: float = 0.0
    validation_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "kind", _enum(ModelKind, self.kind, "model.kind"))
        object.__setattr__(self, "scoring", _enum(IVectorScoring, self.scoring, "model.scoring"))
        object.__setattr__(
            self, "optimizer", _enum(OptimizerKind, self.optimizer, "model.optimizer")
        )
        object.__setattr__(
            self, "regularizer", _enum(RegularizerKind, self.regularizer, "model.regularizer")
        )

        _require(
            self.components is None or self.components >= 1, "model.components must be at least 1"
        )
        for name in ("em_iters", "rank", "ubm_iters", "t_iters", "dense_units"):
            _require(getattr(self, name) >= 1, f"model.{name} must be at least 1")
        for name in ("dense_layers", "rnn_units", "segment_frames", "batch_size", "epochs"):
            _require(getattr(self, name) >= 1, f"model.{name} must be at least 1")
        _require(self.patience >= 0, "model.patience cannot be negative")
        _require(self.score_scale > 0, "model.score_scale must be positive")
        _require(self.lr is None or self.lr > 0, f"model.lr must be positive, got {self.lr}")
        _require(self.coefficient >= 0, "model.coefficient cannot be negative")
        _require(
            0.0 <= self.validation_fraction < 1.0, "model.validation_fraction must be in [0, 1)"
        )
        _require(
            self.dropout is None or 0.0 <= self.dropout <= MAX_DROPOUT,
            f"model.dropout must be in [0, {MAX_DROPOUT}], got {self.dropout}",
        )

        if self.kind == ModelKind.dnn:
            if not DENSE_LAYER_RANGE[0] <= self.dense_layers <= DENSE_LAYER_RANGE[1]:
                logging.warning(f"{self.dense_layers} dense layers is outside {DENSE_LAYER_RANGE}")
            if not DENSE_UNIT_RANGE[0] <= self.dense_units <= DENSE_UNIT_RANGE[1]:
                logging.warning(f"{self.dense_units} dense units is outside {DENSE_UNIT_RANGE}")
        if self.dropout is not None and self.dropout > DROPOUT_RANGE[1]:
            logging.warning(f"Dropout {self.dropout} is above the searched {DROPOUT_RANGE}")

    @property
    def mixture_components(self) -> int:
        if self.components is not None:
            return self.components
        return 256 if self.kind == ModelKind.ivector else 16

    @property
    def network(self) -> bool:
        return self.kind in (ModelKind.dnn, ModelKind.rnn, ModelKind.cnn)


@dataclasses.dataclass(frozen=True, kw_only=True)
class FoldConfig(_Section):
    k: int = 4
    fold_file: typing.Optional[str] = None  # official fold listing, overrides k

    def __post_init__(self):
        _require(self.k >= 2, f"folds.k must be at least 2, got {self.k}")


@dataclasses.dataclass(frozen=True, kw_only=True)
class RunConfig:
    features: FeatureConfig = dataclasses.field(default_factory=FeatureConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    folds: FoldConfig = dataclasses.field(default_factory=FoldConfig)
    seed: int = 0
    jobs: int = 1
    data_root: typing.Optional[str] = None

    def __post_init__(self):
        _require(self.jobs >= 1, f"jobs must be at least 1, got {self.jobs}")
        _require(0 <= self.seed < 2**32, f"seed must fit in 32 bits, got {self.seed}")

    @classmethod
    def from_dict(cls, values: typing.Optional[dict]) -> "RunConfig":
        values = dict(values or {})
        sections = dict(features=FeatureConfig, model=ModelConfig, folds=FoldConfig)
        unknown = sorted(set(values) - set(sections) - {"seed", "jobs", "data_root"})
        if unknown:
            raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")

        parsed = {
            name: kind.from_dict(values.pop(name, None), name) for name, kind in sections.items()
        }
        try:
            return cls(**parsed, **values)
        except TypeError as error:
            raise ConfigError(str(error)) from error

    def to_dict(self) -> dict:
        return dict(
            features=self.features.to_dict(),
            model=self.model.to_dict(),
            folds=self.folds.to_dict(),
            seed=self.seed,
            jobs=self.jobs,
            data_root=self.data_root,
        )

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha1(self.dump().encode("utf8")).hexdigest()

    def with_overrides(
        self,
        features: typing.Optional[dict] = None,
        model: typing.Optional[dict] = None,
        folds: typing.Optional[dict] = None,
        **top,
    ) -> "RunConfig":
        try:
            return RunConfig(
                features=self.features.replace(**(features or {})),
                model=self.model.replace(**(model or {})),
                folds=self.folds.replace(**(folds or {})),
                seed=or_strict(top.get("seed"), self.seed),
                jobs=or_strict(top.get("jobs"), self.jobs),
                data_root=or_strict(top.get("data_root"), self.data_root),
            )
        except TypeError as error:
            raise ConfigError(str(error)) from error

    def resolved_data_root(self) -> typing.Optional[pathlib.Path]:
        root = or_strict(self.data_root, os.environ.get(DATA_ROOT_VARIABLE))
        return None if root is None else pathlib.Path(root)


def load_config(path: typing.Optional[typing.Union[str, pathlib.Path]]) -> RunConfig:
    if path is None:
        return RunConfig()
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf8"))
    except yaml.YAMLError as error:
        raise ConfigError(f"{path}: {error}") from error

    if raw is None:
        return RunConfig()
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: configuration must be a mapping")
    return RunConfig.from_dict(raw)
