import os
import enum
import zlib
import typing
import pathlib
import tempfile
import itertools
import numpy as np
from construct import Adapter, Default, ValidationError
from construct_typed import EnumBase as _EnumBase, csfield as _csfield
from construct_typed.dataclass_struct import Construct, ParsedType, Context

K = typing.TypeVar("K")
V = typing.TypeVar("V")
E = typing.TypeVar("E", bound=enum.EnumMeta)

SeedKey = typing.Union[int, str, bytes]


class EnumBase(_EnumBase):
    @classmethod
    def _missing_(cls, value) -> None:
        return None


def IntEnumAdapter(base_enum: E) -> typing.Type[Adapter]:
    def _encode(self, obj: E, context, path) -> int:
        return int(obj)

    def _decode(self, obj: int, context, path) -> E:
        try:
            return base_enum(obj)
        except ValueError:
            raise ValidationError(f"Unknown {base_enum.__name__} code {obj}", path=path)

    return type(
        f"{base_enum.__name__}Adapter",
        (Adapter,),
        {
            "__slots__": tuple(),
            "_encode": _encode,
            "_decode": _decode,
        },
    )


t = typing


def csfield(
    subcon: Construct[ParsedType, t.Any],
    doc: t.Optional[str] = None,
    parsed: t.Optional[t.Callable[[t.Any, Context], None]] = None,
    init: typing.Optional[bool] = None,
) -> ParsedType:
    field = _csfield(subcon=subcon, doc=doc, parsed=parsed)

    if isinstance(subcon, Default):
        field.init = True

    if init is not None:
        field.init = init

    return field


def or_strict(*args: V) -> typing.Optional[V]:
    for non_none_result in args:
        if non_none_result is not None:
            return non_none_result
    else:
        return None  # not strictly needed, here for readability


def bites(
    iterable_thing: typing.Iterable[V], max_len: int, remainder: bool = True
) -> typing.Generator[typing.Tuple[V, ...], None, None]:
    iterable = iter(iterable_thing)
    while 1:
        next = tuple(itertools.islice(iterable, max_len))
        if (not remainder) and (len(next) != max_len):
            break
        if not next:
            break
        yield next


def _seed_word(key: SeedKey) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, str):
        key = key.encode("utf8")
    return zlib.crc32(key) & 0xFFFFFFFF


def derive_seed(seed: int, *keys: SeedKey) -> int:
    """Mix a master seed with ints, labels or raw bytes into a new 32-bit seed."""
    sequence = np.random.SeedSequence([_seed_word(seed), *(_seed_word(key) for key in keys)])
    return int(sequence.generate_state(1)[0])


def atomic_write(path: typing.Union[str, os.PathLike], data: typing.Union[bytes, str]) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf8")

    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "wb") as temp_file:
            temp_file.write(data)
        os.replace(temp_name, path)
    except BaseException:
        pathlib.Path(temp_name).unlink(missing_ok=True)
        raise
