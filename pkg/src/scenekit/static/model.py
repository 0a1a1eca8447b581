import typing
import construct
import dataclasses
import numpy as np
from scenekit.sugar import EnumBase, IntEnumAdapter, csfield
from scenekit.static import Label, NumpyArrayAdapter
from scenekit.static.constants import FeatureKindAdapter, ModelKind, ModelKindAdapter
from construct_typed import DataclassMixin, DataclassStruct
from construct import (
    this,
    Adapter,
    Const,
    Flag,
    Float64l,
    Int8ul,
    Int16ul,
    Int32ul,
    Pass,
    PrefixedArray,
    Rebuild,
)

GMM_MAGIC = b"SKG1"
CLASSIFIER_MAGIC = b"SKGC"
IVECTOR_MAGIC = b"SKI1"
NETWORK_MAGIC = b"SKN1"
PIPELINE_MAGIC = b"SKP1"


class IVectorScoring(EnumBase):
    cosine = 0
    euclidean = 1


IVectorScoringAdapter = IntEnumAdapter(IVectorScoring)


class LayerType(EnumBase):
    dense = 0x01
    relu = 0x02
    batchnorm = 0x03
    dropout = 0x04
    conv2d = 0x05
    maxpool2d = 0x06
    flatten = 0x07
    gru = 0x08
    bidirectional = 0x09
    softmax = 0x0A


LayerTypeAdapter = IntEnumAdapter(LayerType)


class OptimizerKind(EnumBase):
    sgd = 0
    adam = 1
    rmsprop = 2
    adagrad = 3


OptimizerKindAdapter = IntEnumAdapter(OptimizerKind)


class RegularizerKind(EnumBase):
    none = 0
    l1 = 1
    l2 = 2


RegularizerKindAdapter = IntEnumAdapter(RegularizerKind)


@dataclasses.dataclass(kw_only=True)
class GmmBody(DataclassMixin):
    Components: int = csfield(Rebuild(Int32ul, lambda ctx: ctx.Weights.shape[0]))
    Dim: int = csfield(Rebuild(Int32ul, lambda ctx: ctx.Means.shape[1]))
    Weights: np.ndarray = csfield(NumpyArrayAdapter("<f8", this.Components))
    Means: np.ndarray = csfield(NumpyArrayAdapter("<f8", this.Components, this.Dim))
    Variances: np.ndarray = csfield(NumpyArrayAdapter("<f8", this.Components, this.Dim))


GmmBodyStruct = DataclassStruct(GmmBody)

GmmFile = construct.Struct(
    "Magic" / Const(GMM_MAGIC),
    "Model" / GmmBodyStruct,
)


@dataclasses.dataclass(kw_only=True)
class LabeledGmm(DataclassMixin):
    Label: str = csfield(Label)
    Model: GmmBody = csfield(GmmBodyStruct)


LabeledGmmStruct = DataclassStruct(LabeledGmm)

ClassifierBody = construct.Struct(
    "Classes" / PrefixedArray(Int32ul, LabeledGmmStruct),
)

ClassifierFile = construct.Struct(
    "Magic" / Const(CLASSIFIER_MAGIC),
    "Classifier" / ClassifierBody,
)


@dataclasses.dataclass(kw_only=True)
class IVectorBody(DataclassMixin):
    Ubm: GmmBody = csfield(GmmBodyStruct)
    SuperDim: int = csfield(Rebuild(Int32ul, lambda ctx: ctx.Supervector.shape[0]))
    Rank: int = csfield(Rebuild(Int32ul, lambda ctx: ctx.TMatrix.shape[1]))
    LdaDim: int = csfield(Rebuild(Int32ul, lambda ctx: ctx.Lda.shape[1]))
    Supervector: np.ndarray = csfield(NumpyArrayAdapter("<f8", this.SuperDim))
    TMatrix: np.ndarray = csfield(NumpyArrayAdapter("<f8", this.SuperDim, this.Rank))
    Lda: np.ndarray = csfield(NumpyArrayAdapter("<f8", this.Rank, this.LdaDim))
    Labels: typing.List[str] = csfield(PrefixedArray(Int16ul, Label))
    ClassMeans: np.ndarray = csfield(
        NumpyArrayAdapter("<f8", lambda ctx: len(ctx.Labels), this.LdaDim)
    )
    Scoring: IVectorScoring = csfield(IVectorScoringAdapter(Int8ul))
    LengthNorm: bool = csfield(Flag)
    ScoreScale: float = csfield(Float64l)


IVectorBodyStruct = DataclassStruct(IVectorBody)

IVectorFile = construct.Struct(
    "Magic" / Const(IVECTOR_MAGIC),
    "Model" / IVectorBodyStruct,
)


class TensorAdapter(Adapter):
    """Named float32 tensor of any rank, stored flat after its shape."""

    def _decode(self, obj, context, path) -> typing.Tuple[str, np.ndarray]:
        return obj.Name, obj.Data.reshape(tuple(obj.Shape))

    def _encode(self, obj: typing.Tuple[str, np.ndarray], context, path) -> dict:
        name, array = obj
        array = np.asarray(array)
        return dict(Name=name, Shape=list(array.shape), Data=array.ravel())


Tensor = TensorAdapter(
    construct.Struct(
        "Name" / Label,
        "Shape" / PrefixedArray(Int8ul, Int32ul),
        "Data" / NumpyArrayAdapter("<f4", lambda ctx: int(np.prod(ctx.Shape, dtype=np.int64))),
    )
)

LayerConfig = construct.Switch(
    this.Type,
    {
        LayerType.dense: construct.Struct("Units" / Int32ul),
        LayerType.batchnorm: construct.Struct("Momentum" / Float64l, "Epsilon" / Float64l),
        LayerType.dropout: construct.Struct("Rate" / Float64l),
        LayerType.conv2d: construct.Struct("Filters" / Int32ul),
        LayerType.gru: construct.Struct(
            "Units" / Int32ul,
            "Reverse" / Flag,
            "ReturnSequences" / Flag,
        ),
        LayerType.bidirectional: construct.Struct("Units" / Int32ul, "ReturnSequences" / Flag),
        LayerType.softmax: construct.Struct("Classes" / Int32ul),
    },
    default=Pass,
)

LayerRecord = construct.Struct(
    "Type" / LayerTypeAdapter(Int8ul),
    "Config" / LayerConfig,
    "Tensors" / PrefixedArray(Int16ul, Tensor),
)


@dataclasses.dataclass(kw_only=True)
class TrainSnapshot(DataclassMixin):
    Optimizer: OptimizerKind = csfield(OptimizerKindAdapter(Int8ul))
    LearningRate: float = csfield(Float64l)
    BatchSize: int = csfield(Int32ul)
    Epochs: int = csfield(Int32ul)
    Patience: int = csfield(Int32ul)
    Seed: int = csfield(Int32ul)
    Regularizer: RegularizerKind = csfield(RegularizerKindAdapter(Int8ul))
    Coefficient: float = csfield(Float64l)


TrainSnapshotStruct = DataclassStruct(TrainSnapshot)

NetworkBody = construct.Struct(
    "InputShape" / PrefixedArray(Int8ul, Int32ul),
    "Layers" / PrefixedArray(Int16ul, LayerRecord),
    "Training" / TrainSnapshotStruct,
)

NetworkFile = construct.Struct(
    "Magic" / Const(NETWORK_MAGIC),
    "Network" / NetworkBody,
)


@dataclasses.dataclass(kw_only=True)
class StandardizerRecord(DataclassMixin):
    Dim: int = csfield(Rebuild(Int32ul, lambda ctx: ctx.Mean.shape[0]))
    Mean: np.ndarray = csfield(NumpyArrayAdapter("<f8", this.Dim))
    Std: np.ndarray = csfield(NumpyArrayAdapter("<f8", this.Dim))


StandardizerRecordStruct = DataclassStruct(StandardizerRecord)

# Pipeline envelope: everything predict needs around the family-specific body
PipelineFile = construct.Struct(
    "Magic" / Const(PIPELINE_MAGIC),
    "ModelKind" / ModelKindAdapter(Int8ul),
    "FeatureKind" / FeatureKindAdapter(Int8ul),
    "CvAccuracy" / Float64l,
    "SegmentFrames" / Int32ul,
    "Labels" / PrefixedArray(Int16ul, Label),
    "Standardizer" / StandardizerRecordStruct,
    "Body"
    / construct.Switch(
        this.ModelKind,
        {
            ModelKind.gmm: ClassifierBody,
            ModelKind.ivector: IVectorBodyStruct,
            ModelKind.dnn: NetworkBody,
            ModelKind.rnn: NetworkBody,
            ModelKind.cnn: NetworkBody,
        },
    ),
)


class ModelFormatError(Exception):
    ...


def expect_magic(data: bytes, magic: bytes) -> None:
    if data[:4] != magic:
        raise ModelFormatError(f"Expected a {magic.decode()} file, found magic {data[:4]!r}")
