import dataclasses
import numpy as np
from scenekit.sugar import csfield
from scenekit.static import NumpyArrayAdapter
from scenekit.static.constants import FeatureKind, FeatureKindAdapter
from construct_typed import DataclassMixin, DataclassStruct
from construct import this, Const, Int8ul, Int32ul, Float32l, Rebuild

FEATURE_MAGIC = b"SKF1"
META_SUFFIX = ".meta"


@dataclasses.dataclass(kw_only=True)
class FeatureFile(DataclassMixin):
    Magic: bytes = csfield(Const(FEATURE_MAGIC))
    Dim: int = csfield(Rebuild(Int32ul, lambda ctx: ctx.Frames.shape[1]))
    FrameCount: int = csfield(Rebuild(Int32ul, lambda ctx: ctx.Frames.shape[0]))
    FramePeriod: float = csfield(Float32l)
    Kind: FeatureKind = csfield(FeatureKindAdapter(Int8ul))
    Frames: np.ndarray = csfield(NumpyArrayAdapter("<f4", this.FrameCount, this.Dim))


FeatureFileStruct = DataclassStruct(FeatureFile)


def format_meta(values: dict) -> str:
    return "".join(f"{key}={values[key]}\n" for key in sorted(values))


def parse_meta(text: str) -> dict:
    values = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, separator, value = line.partition("=")
        if not separator:
            raise ValueError(f"Sidecar line without '=': {line!r}")
        values[key.strip()] = value.strip()
    return values
