import typing
import dataclasses
from scenekit.sugar import EnumBase, IntEnumAdapter


class FeatureKind(EnumBase):
    mfcc61 = 0x01
    bimfcc183 = 0x02
    logmel60 = 0x03
    logmel200 = 0x04
    func983like = 0x05
    func6klike = 0x06


FeatureKindAdapter = IntEnumAdapter(FeatureKind)


class ModelKind(EnumBase):
    gmm = 0x01
    ivector = 0x02
    dnn = 0x03
    rnn = 0x04
    cnn = 0x05


ModelKindAdapter = IntEnumAdapter(ModelKind)


class DescriptorSet(EnumBase):
    compact = 0
    extended = 1


@dataclasses.dataclass(frozen=True, kw_only=True)
class FeatureConstants:
    Kind: FeatureKind
    Dim: int
    Stereo: bool
    MelBands: typing.Optional[int]
    Descriptors: typing.Optional[DescriptorSet]

    by_kind: typing.ClassVar = typing.cast(typing.Dict[FeatureKind, "FeatureConstants"], {})

    def __post_init__(self):
        self.by_kind[self.Kind] = self

    @property
    def spectrogram(self) -> bool:
        """Frames form a frequency axis, so 2-D patches make sense."""
        return self.MelBands is not None


MFCC61 = FeatureConstants(
    Kind=FeatureKind.mfcc61,
    Dim=61,
    Stereo=False,
    MelBands=None,
    Descriptors=None,
)

BIMFCC183 = FeatureConstants(
    Kind=FeatureKind.bimfcc183,
    Dim=183,
    Stereo=True,
    MelBands=None,
    Descriptors=None,
)

LOGMEL60 = FeatureConstants(
    Kind=FeatureKind.logmel60,
    Dim=60,
    Stereo=False,
    MelBands=60,
    Descriptors=None,
)

LOGMEL200 = FeatureConstants(
    Kind=FeatureKind.logmel200,
    Dim=200,
    Stereo=False,
    MelBands=200,
    Descriptors=None,
)

# 30 low-level descriptors x 11 functionals, x3 with deltas
FUNC983LIKE = FeatureConstants(
    Kind=FeatureKind.func983like,
    Dim=330,
    Stereo=False,
    MelBands=None,
    Descriptors=DescriptorSet.compact,
)

FUNC6KLIKE = FeatureConstants(
    Kind=FeatureKind.func6klike,
    Dim=990,
    Stereo=False,
    MelBands=None,
    Descriptors=DescriptorSet.extended,
)
