"""Numeric substrate: float64 ndarrays, shape-checked math, a seeded RNG and
the ``CVT1`` binary blob format used inside checkpoints."""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

Tensor = np.ndarray

DTYPE = np.float64
BLOB_MAGIC = b"CVT1"


class ShapeError(ValueError):
    pass


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ShapeError(f"all dimensions must be >= 1, got {shape}")
    return shape


def as_tensor(values) -> Tensor:
    return np.ascontiguousarray(values, dtype=DTYPE)


def zeros(shape: Sequence[int]) -> Tensor:
    return np.zeros(_check_shape(shape), dtype=DTYPE)


def ones(shape: Sequence[int]) -> Tensor:
    return np.ones(_check_shape(shape), dtype=DTYPE)


def fill(shape: Sequence[int], value: float) -> Tensor:
    return np.full(_check_shape(shape), float(value), dtype=DTYPE)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if np.ndim(a) == 0 or np.ndim(b) == 0:
        return
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def map(fn: Callable[[Tensor], Tensor], a: Tensor) -> Tensor:  # noqa: A001
    return as_tensor(fn(as_tensor(a)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return a + b


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return a * b


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def reduce_sum(a, axis: int | None = None) -> Tensor | float:
    a = as_tensor(a)
    if axis is None:
        return float(np.sum(a))
    return np.sum(a, axis=axis)


def reduce_mean(a, axis: int | None = None) -> Tensor | float:
    a = as_tensor(a)
    if axis is None:
        return float(np.mean(a))
    return np.mean(a, axis=axis)


def spatial_mean(featmap) -> float:
    """Mean response over all positions of a single ``[H, W]`` feature map."""
    featmap = as_tensor(featmap)
    if featmap.ndim != 2:
        raise ShapeError(f"spatial_mean expects [H, W], got shape {featmap.shape}")
    return float(featmap.mean())


class Rng:
    """Seeded PCG64 stream. PCG64 output is specified bit-for-bit, so a seed
    reproduces the same stream on every platform numpy supports."""

    algorithm = "PCG64"

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, scale: float = 1.0) -> Tensor:
        return self._gen.standard_normal(size=tuple(shape)) * scale

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape=None):
        return self._gen.random(size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def spawn(self, key: int) -> "Rng":
        """Derive an independent stream without advancing this one."""
        return Rng(np.random.SeedSequence([self.seed, int(key)]).generate_state(1, np.uint64)[0])

    def get_state(self) -> str:
        return json.dumps({"seed": self.seed, "bit_generator": self._gen.bit_generator.state},
                          sort_keys=True)

    @classmethod
    def from_state(cls, state: str) -> "Rng":
        payload = json.loads(state)
        rng = cls(payload["seed"])
        rng._gen.bit_generator.state = payload["bit_generator"]
        return rng


def write_blob(stream: BinaryIO, tensor) -> None:
    tensor = as_tensor(tensor)
    stream.write(BLOB_MAGIC)
    stream.write(struct.pack("<I", tensor.ndim))
    stream.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
    stream.write(tensor.astype("<f8", copy=False).tobytes(order="C"))


def read_blob(stream: BinaryIO) -> Tensor:
    magic = stream.read(4)
    if magic != BLOB_MAGIC:
        raise ValueError(f"bad tensor blob magic {magic!r}")
    header = stream.read(4)
    if len(header) != 4:
        raise ValueError("truncated tensor blob header")
    (rank,) = struct.unpack("<I", header)
    dims_raw = stream.read(8 * rank)
    if len(dims_raw) != 8 * rank:
        raise ValueError("truncated tensor blob dims")
    dims = struct.unpack(f"<{rank}Q", dims_raw)
    count = int(np.prod(dims)) if rank else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor blob payload")
    return np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(dims)


def blob_bytes(tensor) -> bytes:
    buf = io.BytesIO()
    write_blob(buf, tensor)
    return buf.getvalue()
