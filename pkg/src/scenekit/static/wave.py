import construct
import dataclasses
from scenekit.sugar import IntEnumAdapter, EnumBase, csfield
from construct_typed import DataclassMixin, DataclassStruct
from construct import this, Const, Bytes, Int16ul, Int32ul, Rebuild, Padding

RIFF_MAGIC = b"RIFF"
WAVE_MAGIC = b"WAVE"
FORMAT_CHUNK = b"fmt "
DATA_CHUNK = b"data"

FORMAT_BODY_SIZE = 16


class WaveCodec(EnumBase):
    Pcm = 0x0001
    Adpcm = 0x0002
    IeeeFloat = 0x0003
    ALaw = 0x0006
    MuLaw = 0x0007
    Mpeg = 0x0050
    Extensible = 0xFFFE


WaveCodecAdapter = IntEnumAdapter(WaveCodec)


@dataclasses.dataclass(kw_only=True)
class RiffHeader(DataclassMixin):
    Magic: bytes = csfield(Const(RIFF_MAGIC))
    Size: int = csfield(Int32ul)
    Format: bytes = csfield(Const(WAVE_MAGIC))


RiffHeaderStruct = DataclassStruct(RiffHeader)


@dataclasses.dataclass(kw_only=True)
class ChunkHeader(DataclassMixin):
    Id: bytes = csfield(Bytes(4))
    Size: int = csfield(Int32ul)


ChunkHeaderStruct = DataclassStruct(ChunkHeader)


@dataclasses.dataclass(kw_only=True)
class WaveFormat(DataclassMixin):
    Codec: WaveCodec = csfield(WaveCodecAdapter(Int16ul))
    Channels: int = csfield(Int16ul)
    SampleRate: int = csfield(Int32ul)
    ByteRate: int = csfield(Int32ul)
    BlockAlign: int = csfield(Int16ul)
    BitsPerSample: int = csfield(Int16ul)


WaveFormatStruct = DataclassStruct(WaveFormat)


# Canonical writer layout: header, 16-byte fmt chunk, data chunk
PcmWaveFile = construct.Struct(
    "Magic" / Const(RIFF_MAGIC),
    "Size"
    / Rebuild(
        Int32ul, lambda ctx: 4 + 8 + FORMAT_BODY_SIZE + 8 + len(ctx.Data) + len(ctx.Data) % 2
    ),
    "Format" / Const(WAVE_MAGIC),
    "FormatId" / Const(FORMAT_CHUNK),
    "FormatSize" / Const(FORMAT_BODY_SIZE, Int32ul),
    "Fmt" / WaveFormatStruct,
    "DataId" / Const(DATA_CHUNK),
    "DataSize" / Rebuild(Int32ul, construct.len_(this.Data)),
    "Data" / Bytes(this.DataSize),
    Padding(this.DataSize % 2),
)
