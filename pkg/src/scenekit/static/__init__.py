import typing
import numpy as np
from construct import Adapter, Bytes, PascalString, Int16ul

ShapeSpec = typing.Union[int, typing.Callable[[typing.Any], int]]


def _resolve(value: ShapeSpec, context) -> int:
    return int(value(context)) if callable(value) else int(value)


class NumpyArrayAdapter(Adapter):
    """Raw little-endian array payload, shaped from already-parsed header fields."""

    __slots__ = "dtype", "shape"

    def __init__(self, dtype: str, *shape: ShapeSpec):
        self.dtype = np.dtype(dtype)
        self.shape = shape
        super().__init__(Bytes(lambda ctx: self._byte_count(ctx)))

    def _byte_count(self, context) -> int:
        count = 1
        for dimension in self.shape:
            count *= _resolve(dimension, context)
        return count * self.dtype.itemsize

    def _encode(self, array: np.ndarray, context, path) -> bytes:
        expected = tuple(_resolve(dimension, context) for dimension in self.shape)
        array = np.ascontiguousarray(array, dtype=self.dtype)
        if array.shape != expected:
            raise ValueError(f"Array shape {array.shape} does not match header shape {expected}")
        return array.tobytes()

    def _decode(self, data: bytes, context, path) -> np.ndarray:
        shape = tuple(_resolve(dimension, context) for dimension in self.shape)
        return np.frombuffer(data, dtype=self.dtype).reshape(shape).copy()


Label = PascalString(Int16ul, "utf8")
