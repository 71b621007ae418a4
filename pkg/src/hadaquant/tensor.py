"""Dense float32 tensor type, deterministic RNG, sampling, and CSRT file I/O.

CSRT layout (little-endian throughout):

    magic   4 bytes  b"CSRT"
    version u8       1
    dtype   u8       0 (float32)
    ndim    u8
    dims    ndim x u64
    payload product(dims) x f32, row-major

The sampling RNG is pinned so that independent implementations can
reproduce samples bit-for-bit: xoshiro256** seeded via splitmix64, with
partial Fisher-Yates index selection using ``j = i + next_u64() % (n - i)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError

_MAGIC = b"CSRT"
_VERSION = 1
_DTYPE_F32 = 0

_MASK64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class Seed:
    """64-bit seed; equal seeds on equal inputs give bit-identical samples."""

    value: int = 0

    def __post_init__(self):
        if not 0 <= self.value <= _MASK64:
            raise ValueError(f"seed must fit in 64 bits, got {self.value}")


class Tensor:
    """Dense row-major float32 tensor; immutable after construction."""

    __slots__ = ("array",)

    def __init__(self, data, shape=None):
        arr = np.asarray(data, dtype=np.float32)
        if shape is not None:
            arr = arr.reshape(shape)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"dimensions must be positive, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("tensor entries must be finite (no NaN/Inf)")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    def __setattr__(self, name, value):
        raise AttributeError("Tensor is immutable")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def numel(self) -> int:
        return self.array.size

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.array, other.array)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)})"


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Xoshiro256StarStar:
    """xoshiro256** 1.0 (Blackman & Vigna), seeded via splitmix64."""

    __slots__ = ("s",)

    def __init__(self, seed: Seed):
        state = seed.value
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        if not any(s):
            s[0] = 1  # all-zero state is invalid for xoshiro
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        x = (s1 * 5) & _MASK64
        result = (((x << 7) | (x >> 57)) & _MASK64) * 9 & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self.s = [s0, s1, s2, s3]
        return result


def sample_elements(t: Tensor, k: int, seed: Seed) -> np.ndarray:
    """Sample ``k`` elements uniformly without replacement, deterministically.

    Returns all elements in row-major order when ``k >= numel``.  Selection
    uses a partial Fisher-Yates shuffle of the index array driven by
    xoshiro256**, so equal seeds give bit-identical output.
    """
    if k < 1:
        raise ValueError(f"sample count must be >= 1, got {k}")
    flat = t.array.reshape(-1).astype(np.float64)
    n = flat.size
    if k >= n:
        return flat.copy()
    rng = Xoshiro256StarStar(seed)
    next_u64 = rng.next_u64
    idx = list(range(n))
    for i in range(k):
        j = i + next_u64() % (n - i)
        idx[i], idx[j] = idx[j], idx[i]
    return flat[idx[:k]]


def save_tensor(t: Tensor, path) -> None:
    """Write ``t`` in CSRT format; ``load_tensor`` inverts it exactly."""
    arr = t.array
    header = struct.pack("<4sBBB", _MAGIC, _VERSION, _DTYPE_F32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype("<f4").tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(dims)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write tensor to {path!r}: {exc}") from exc


def load_tensor(path) -> Tensor:
    """Read a CSRT file; byte-for-byte round-trip with ``save_tensor``."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read tensor from {path!r}: {exc}") from exc
    if len(blob) < 7:
        raise FormatError(f"{path!r}: truncated CSRT header")
    magic, version, dtype, ndim = struct.unpack_from("<4sBBB", blob, 0)
    if magic != _MAGIC:
        raise FormatError(f"{path!r}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"{path!r}: unsupported CSRT version {version}")
    if dtype != _DTYPE_F32:
        raise FormatError(f"{path!r}: unsupported dtype code {dtype}")
    if ndim < 1:
        raise FormatError(f"{path!r}: ndim must be >= 1")
    offset = 7
    if len(blob) < offset + 8 * ndim:
        raise FormatError(f"{path!r}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}Q", blob, offset)
    offset += 8 * ndim
    if any(d == 0 for d in dims):
        raise FormatError(f"{path!r}: zero dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
    expected = offset + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{path!r}: payload length {len(blob) - offset} bytes, expected {4 * count}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path!r}: payload contains non-finite values")
    return Tensor(data.reshape(dims))
