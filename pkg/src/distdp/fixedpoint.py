"""Fixed-point encoding with exact modular arithmetic.

Values are stored as unsigned ``bit_width``-bit integers in ``uint64``
arrays and every sum is reduced mod ``2**bit_width``.  Blinding shares
therefore cancel bit-exactly, whatever order they are added in.  Negative
numbers use the two's-complement reading of the stored word.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch

_HEADER = struct.Struct("<HHI")


@dataclass(frozen=True)
class FixedPointParams:
    bit_width: int = 64
    frac_bits: int = 32

    def __post_init__(self):
        if not 0 < self.frac_bits < self.bit_width <= 64:
            raise ValueError(
                f"need 0 < frac_bits < bit_width <= 64, got "
                f"frac_bits={self.frac_bits}, bit_width={self.bit_width}"
            )

    @property
    def scale(self) -> float:
        return float(2**self.frac_bits)

    @property
    def bound(self) -> float:
        """Representable magnitude R; inputs must satisfy |x| < R."""
        return float(2 ** (self.bit_width - self.frac_bits - 1))

    @property
    def mask(self) -> np.uint64:
        return np.uint64((1 << self.bit_width) - 1)

    @property
    def word_bytes(self) -> int:
        return (self.bit_width + 7) // 8

    @property
    def max_abs(self) -> float:
        """Largest magnitude that encodes without overflow."""
        return (2 ** (self.bit_width - 1) - 1) / self.scale


DEFAULT_PARAMS = FixedPointParams()


def encode_array(x, params: FixedPointParams = DEFAULT_PARAMS) -> np.ndarray:
    """Encode reals of any shape into ``uint64`` words mod ``2**bit_width``.

    Raises:
        OverflowError: if a component is non-finite or outside (-R, R).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise OverflowError("cannot encode non-finite values")
    if x.size and np.max(np.abs(x)) >= params.bound:
        raise OverflowError(
            f"value {np.max(np.abs(x))!r} outside fixed-point range "
            f"(-{params.bound}, {params.bound})"
        )
    scaled = np.rint(x * params.scale)
    limit = float(2 ** (params.bit_width - 1))
    # rounding can push a value just below R onto the sign bit
    if scaled.size and (scaled.max() >= limit or scaled.min() < -limit):
        raise OverflowError("value rounds outside the fixed-point range")
    return scaled.astype(np.int64).view(np.uint64) & params.mask


def decode_array(words, params: FixedPointParams = DEFAULT_PARAMS) -> np.ndarray:
    words = np.asarray(words, dtype=np.uint64) & params.mask
    if params.bit_width == 64:
        signed = words.view(np.int64)
    else:
        half = np.uint64(1 << (params.bit_width - 1))
        signed = words.astype(np.int64)
        signed = np.where(words >= half, signed - np.int64(1 << params.bit_width), signed)
    return signed.astype(np.float64) / params.scale


def clip_to_range(x, params: FixedPointParams = DEFAULT_PARAMS) -> np.ndarray:
    m = params.max_abs
    return np.clip(np.asarray(x, dtype=np.float64), -m, m)


def random_words(shape, params: FixedPointParams = DEFAULT_PARAMS, rng=None) -> np.ndarray:
    """Uniform words on [0, 2**bit_width).

    With ``rng=None`` the bytes come from ``os.urandom``.  A seeded
    ``numpy.random.Generator`` may be passed for reproducible tests.
    """
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    count = int(np.prod(shape, dtype=np.int64))
    if rng is None:
        raw = np.frombuffer(os.urandom(8 * count), dtype="<u8").astype(np.uint64)
    else:
        raw = rng.bit_generator.random_raw(count).astype(np.uint64, copy=False)
    return raw.reshape(shape) & params.mask


def modsum(words, axis=0, params: FixedPointParams = DEFAULT_PARAMS) -> np.ndarray:
    # uint64 addition wraps mod 2**64; masking reduces further for narrower words
    return np.sum(np.asarray(words, dtype=np.uint64), axis=axis, dtype=np.uint64) & params.mask


@dataclass(frozen=True, eq=False)
class FixedPointVector:
    values: np.ndarray
    params: FixedPointParams = DEFAULT_PARAMS

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.uint64).reshape(-1) & self.params.mask
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    def __len__(self):
        return self.dimension

    def __eq__(self, other):
        if not isinstance(other, FixedPointVector):
            return NotImplemented
        return self.params == other.params and np.array_equal(self.values, other.values)

    def __add__(self, other: "FixedPointVector") -> "FixedPointVector":
        return add(self, other)

    def __neg__(self) -> "FixedPointVector":
        return FixedPointVector((~self.values + np.uint64(1)) & self.params.mask, self.params)

    def __repr__(self):
        return f"FixedPointVector(d={self.dimension}, values={self.values.tolist()!r})"

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(self.params.bit_width, self.params.frac_bits, self.dimension)
        nb = self.params.word_bytes
        if nb == 8:
            body = self.values.astype("<u8").tobytes()
        else:
            body = b"".join(int(w).to_bytes(nb, "little") for w in self.values)
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> "FixedPointVector":
        vec, used = cls.read_from(data)
        if used != len(data):
            raise ValueError(f"{len(data) - used} trailing bytes after vector")
        return vec

    @classmethod
    def read_from(cls, data: bytes, offset: int = 0):
        """Parse one vector starting at ``offset``; returns (vector, end offset)."""
        if len(data) - offset < _HEADER.size:
            raise ValueError("truncated fixed-point header")
        bit_width, frac_bits, dim = _HEADER.unpack_from(data, offset)
        params = FixedPointParams(bit_width, frac_bits)
        nb = params.word_bytes
        start = offset + _HEADER.size
        end = start + nb * dim
        if len(data) < end:
            raise ValueError("truncated fixed-point body")
        if nb == 8:
            values = np.frombuffer(data, dtype="<u8", count=dim, offset=start).astype(np.uint64)
        else:
            values = np.array(
                [int.from_bytes(data[start + i * nb:start + (i + 1) * nb], "little") for i in range(dim)],
                dtype=np.uint64,
            )
        return cls(values, params), end


def encode(x, params: FixedPointParams = DEFAULT_PARAMS) -> FixedPointVector:
    return FixedPointVector(encode_array(np.atleast_1d(x), params), params)


def decode(v: FixedPointVector) -> np.ndarray:
    return decode_array(v.values, v.params)


def zeros(dimension: int, params: FixedPointParams = DEFAULT_PARAMS) -> FixedPointVector:
    return FixedPointVector(np.zeros(dimension, dtype=np.uint64), params)


def _check_compatible(a: FixedPointVector, b: FixedPointVector):
    if a.params != b.params:
        raise DimensionMismatch(f"fixed-point parameters differ: {a.params} vs {b.params}")
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"dimensions differ: {a.dimension} vs {b.dimension}")


def add(a: FixedPointVector, b: FixedPointVector) -> FixedPointVector:
    _check_compatible(a, b)
    return FixedPointVector((a.values + b.values) & a.params.mask, a.params)


def sum_vectors(vectors: Iterable[FixedPointVector], dimension: int | None = None,
                params: FixedPointParams = DEFAULT_PARAMS) -> FixedPointVector:
    """Modular sum of vectors; an empty input gives the zero vector."""
    vectors = list(vectors)
    if not vectors:
        if dimension is None:
            raise ValueError("dimension is required to sum an empty list")
        return zeros(dimension, params)
    first = vectors[0]
    for v in vectors[1:]:
        _check_compatible(first, v)
    stacked = np.stack([v.values for v in vectors])
    return FixedPointVector(modsum(stacked, 0, first.params), first.params)


def split_shares(v: FixedPointVector, M: int, rng=None) -> list[FixedPointVector]:
    """Split ``v`` into ``M`` additive shares.

    The first ``M - 1`` shares are uniform words; the last one is chosen so
    that all shares sum to ``v`` mod ``2**bit_width``.
    """
    if M < 1:
        raise ValueError(f"need at least one share, got M={M}")
    params = v.params
    random_part = random_words((M - 1, v.dimension), params, rng)
    last = (v.values - modsum(random_part, 0, params)) & params.mask
    return [FixedPointVector(r, params) for r in random_part] + [FixedPointVector(last, params)]


def blinding_shares(dimension: int, M: int, params: FixedPointParams = DEFAULT_PARAMS,
                    rng=None) -> np.ndarray:
    """``M`` blinding vectors summing to zero, as an ``(M, dimension)`` word array."""
    out = np.empty((M, dimension), dtype=np.uint64)
    out[:M - 1] = random_words((M - 1, dimension), params, rng)
    out[M - 1] = (np.uint64(0) - modsum(out[:M - 1], 0, params)) & params.mask
    return out


__all__: Sequence[str] = [
    "FixedPointParams",
    "FixedPointVector",
    "DEFAULT_PARAMS",
    "encode",
    "decode",
    "add",
    "sum_vectors",
    "split_shares",
    "blinding_shares",
    "encode_array",
    "decode_array",
    "clip_to_range",
    "random_words",
    "modsum",
    "zeros",
]
