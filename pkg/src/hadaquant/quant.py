"""Fake quantization with decomposed scalars, bound search, and bit-packing.

The quantizer clips to [l, u], rounds half away from zero, and carries two
trainable offsets: alpha added to the scale and beta added to the zero
offset.  With alpha = beta = 0 it reduces exactly to the plain min-max
affine quantizer.  Codes are clamped to [0, 2^b - 1] after rounding since
the offsets can push values outside the representable range.

CSRQ layout (little-endian):

    magic    4 bytes b"CSRQ"
    version  u8 1
    b        u8
    hadamard u8 0/1
    ndim     u8
    dims     ndim x u64        (stored, i.e. padded, dims)
    pad_orig u64               (pre-pad last dim; 0 = no padding recorded)
    l,u,alpha,beta  4 x f64
    mask_present    u8
    [mask    ceil(numel/8) bytes, 1 bit per stored element, LSB-first,
             bit = 1 marks a kept element]
    code_count      u64
    codes    ceil(code_count*b/8) bytes, b bits per code, LSB-first
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError
from .hadamard import PadInfo, next_pow2
from .tensor import Seed, Tensor, sample_elements

_MAGIC = b"CSRQ"
_VERSION = 1

# Bound search: per-side shrink limit and MSE-evaluation sample cap.
_SEARCH_SHRINK = 0.45
_SEARCH_SAMPLE_CAP = 65536
_SEARCH_SEED = Seed(0xD0B1)
_DEGENERATE_HALF_WIDTH = 1e-4


@dataclass(frozen=True)
class QuantParams:
    """Per-tensor quantizer: bit-width, clip bounds, and the two offsets."""

    b: int
    l: float
    u: float
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if not isinstance(self.b, (int, np.integer)) or not 2 <= self.b <= 8:
            raise ValueError(f"bit-width must be an integer in [2, 8], got {self.b}")
        if not self.u > self.l:
            raise ValueError(f"upper bound {self.u} must exceed lower bound {self.l}")
        if self.eff_scale <= 0:
            raise ValueError(f"effective scale {self.eff_scale} must be positive")

    @property
    def nlevels(self) -> int:
        return (1 << self.b) - 1

    @property
    def scale(self) -> float:
        return (self.u - self.l) / self.nlevels

    @property
    def eff_scale(self) -> float:
        """Dequantization scale S + alpha."""
        return self.scale + self.alpha

    @property
    def eff_zero(self) -> float:
        """Zero offset l + beta."""
        return self.l + self.beta


def round_half_away(v: np.ndarray) -> np.ndarray:
    """Round halves away from zero (numpy rounds halves to even)."""
    return np.floor(np.abs(v) + 0.5) * np.sign(v)


def clip(x: Tensor, l: float, u: float) -> Tensor:
    """Elementwise min(max(x, l), u)."""
    if not u > l:
        raise ValueError(f"upper bound {u} must exceed lower bound {l}")
    return Tensor(np.clip(x.array, l, u))


def _quantize_array(x: np.ndarray, p: QuantParams) -> np.ndarray:
    vc = np.clip(x.astype(np.float64), p.l, p.u)
    slope = p.nlevels / (p.u - p.l) + p.alpha
    codes = round_half_away(slope * (vc - p.eff_zero))
    return np.clip(codes, 0, p.nlevels).astype(np.uint16)


def quantize(x: Tensor, p: QuantParams) -> np.ndarray:
    """Codes = Round((2^b-1)/(u-l) + alpha) * (clip(x) - (l+beta)), clamped."""
    return _quantize_array(x.array, p)


def _dequantize_array(codes: np.ndarray, p: QuantParams) -> np.ndarray:
    return p.eff_scale * codes.astype(np.float64) + p.eff_zero


def dequantize(codes: np.ndarray, p: QuantParams) -> Tensor:
    """((u-l)/(2^b-1) + alpha) * code + (l+beta), elementwise."""
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > p.nlevels):
        raise DataError(f"codes outside [0, {p.nlevels}]")
    return Tensor(_dequantize_array(codes, p))


def fake_quantize(x: Tensor, p: QuantParams) -> Tensor:
    """Quantize then immediately dequantize; same shape as x."""
    return Tensor(_dequantize_array(_quantize_array(x.array, p), p).reshape(x.shape))


def _fq_mse(vals: np.ndarray, p: QuantParams) -> float:
    deq = _dequantize_array(_quantize_array(vals, p), p)
    return float(np.mean((deq - vals) ** 2))


def search_bounds(x: Tensor, b: int, steps: int = 64) -> QuantParams:
    """Grid-search clip bounds minimizing fake-quantization MSE.

    Each side is searched in turn on a shrinking grid (limit 45% of the
    data range per side): first l with u fixed at the maximum, then u given
    the chosen l.  Plain min-max bounds are the first candidate on each
    side, so the returned MSE never exceeds theirs.  Returned params have
    alpha = beta = 0.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if x.numel > _SEARCH_SAMPLE_CAP:
        vals = sample_elements(x, _SEARCH_SAMPLE_CAP, _SEARCH_SEED)
    else:
        vals = x.array.reshape(-1).astype(np.float64)
    mn = float(vals.min())
    mx = float(vals.max())
    if mx == mn:
        return QuantParams(b, mn - _DEGENERATE_HALF_WIDTH, mx + _DEGENERATE_HALF_WIDTH)
    delta = (mx - mn) * _SEARCH_SHRINK / steps

    best_l, best_err = mn, math.inf
    for i in range(steps + 1):
        cand = mn + i * delta
        err = _fq_mse(vals, QuantParams(b, cand, mx))
        if err < best_err:
            best_l, best_err = cand, err
    best_u, best_err = mx, math.inf
    for j in range(steps + 1):
        cand = mx - j * delta
        err = _fq_mse(vals, QuantParams(b, best_l, cand))
        if err < best_err:
            best_u, best_err = cand, err
    return QuantParams(b, best_l, best_u)


def _pack_bits(values: np.ndarray, width: int) -> bytes:
    """Pack unsigned ints of ``width`` bits each, LSB-first within bytes."""
    values = values.astype(np.uint16).reshape(-1)
    bits = ((values[:, None] >> np.arange(width, dtype=np.uint16)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def _unpack_bits(blob: bytes, count: int, width: int) -> np.ndarray:
    raw = np.frombuffer(blob, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")
    need = count * width
    if bits.size < need:
        raise FormatError("truncated bit stream")
    bits = bits[:need].reshape(count, width).astype(np.uint16)
    return (bits << np.arange(width, dtype=np.uint16)).sum(axis=1).astype(np.uint16)


@dataclass(frozen=True)
class PackedTensor:
    """Bit-packed codes plus everything needed to reconstruct the tensor."""

    params: QuantParams
    shape: tuple[int, ...]
    pad: PadInfo | None
    codes: bytes
    mask: np.ndarray | None  # bool over the stored (padded) tensor; True = kept
    hadamard_applied: bool = False

    def __post_init__(self):
        numel = self.stored_numel
        if self.mask is not None:
            if self.mask.dtype != np.bool_ or self.mask.size != numel:
                raise ValueError("mask must be a bool array over the stored tensor")
        expect = (self.code_count * self.params.b + 7) // 8
        if len(self.codes) != expect:
            raise FormatError(
                f"code stream is {len(self.codes)} bytes, expected {expect}"
            )

    @property
    def stored_shape(self) -> tuple[int, ...]:
        if self.pad is None:
            return self.shape
        return self.shape[:-1] + (self.pad.padded_dim,)

    @property
    def stored_numel(self) -> int:
        n = 1
        for d in self.stored_shape:
            n *= d
        return n

    @property
    def code_count(self) -> int:
        if self.mask is not None:
            return int(self.mask.sum())
        return self.stored_numel

    def codes_array(self) -> np.ndarray:
        return _unpack_bits(self.codes, self.code_count, self.params.b)


def pack(
    codes: np.ndarray,
    p: QuantParams,
    shape,
    pad: PadInfo | None = None,
    mask: np.ndarray | None = None,
    hadamard_applied: bool = False,
) -> PackedTensor:
    """Bit-pack integer codes into a PackedTensor.

    With a mask, ``codes`` covers kept positions only (row-major order);
    pruned positions carry no code and unpack to 0.0.
    """
    codes = np.asarray(codes).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() > p.nlevels):
        raise DataError(f"codes outside [0, {p.nlevels}]")
    shape = tuple(int(d) for d in shape)
    if mask is not None:
        mask = np.asarray(mask, dtype=np.bool_).reshape(-1)
        expected = int(mask.sum())
    else:
        expected = 1
        for d in shape[:-1]:
            expected *= d
        expected *= pad.padded_dim if pad is not None else shape[-1]
    if codes.size != expected:
        raise ValueError(f"got {codes.size} codes, expected {expected}")
    return PackedTensor(p, shape, pad, _pack_bits(codes, p.b), mask, hadamard_applied)


def unpack(pt: PackedTensor) -> Tensor:
    """Dequantize a PackedTensor; pruned positions come back as 0.0.

    The result lives in the stored (padded) domain; apply the inverse
    Hadamard transform afterwards if ``hadamard_applied`` is set.
    """
    deq = _dequantize_array(pt.codes_array(), pt.params)
    if pt.mask is None:
        return Tensor(deq.reshape(pt.stored_shape))
    out = np.zeros(pt.stored_numel, dtype=np.float64)
    out[pt.mask] = deq
    return Tensor(out.reshape(pt.stored_shape))


def bits_per_parameter(pt: PackedTensor) -> float:
    """Storage cost per element: b * keep_fraction + 1 with a mask, else b."""
    if pt.mask is None:
        return float(pt.params.b)
    return pt.params.b * (pt.code_count / pt.stored_numel) + 1.0


def aggregate_bits_per_parameter(pts) -> float:
    """Total stored bits over total stored parameters for several tensors."""
    total_bits = 0
    total_params = 0
    for pt in pts:
        numel = pt.stored_numel
        total_params += numel
        if pt.mask is None:
            total_bits += pt.params.b * numel
        else:
            total_bits += pt.params.b * pt.code_count + numel
    if total_params == 0:
        raise ValueError("no packed tensors given")
    return total_bits / total_params


def save_packed(pt: PackedTensor, path) -> None:
    """Write a PackedTensor in CSRQ format."""
    p = pt.params
    stored = pt.stored_shape
    parts = [
        struct.pack("<4sBBBB", _MAGIC, _VERSION, p.b, int(pt.hadamard_applied), len(stored)),
        struct.pack(f"<{len(stored)}Q", *stored),
        struct.pack("<Q", pt.pad.original_dim if pt.pad is not None else 0),
        struct.pack("<4d", p.l, p.u, p.alpha, p.beta),
        struct.pack("<B", int(pt.mask is not None)),
    ]
    if pt.mask is not None:
        parts.append(_pack_bits(pt.mask.astype(np.uint16), 1))
    parts.append(struct.pack("<Q", pt.code_count))
    parts.append(pt.codes)
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write packed tensor to {path!r}: {exc}") from exc


def load_packed(path) -> PackedTensor:
    """Read a CSRQ file written by ``save_packed``."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read packed tensor from {path!r}: {exc}") from exc

    def take(fmt: str, offset: int):
        size = struct.calcsize(fmt)
        if len(blob) < offset + size:
            raise FormatError(f"{path!r}: truncated CSRQ file")
        return struct.unpack_from(fmt, blob, offset), offset + size

    (magic, version, b, had, ndim), off = take("<4sBBBB", 0)
    if magic != _MAGIC:
        raise FormatError(f"{path!r}: bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise FormatError(f"{path!r}: unsupported CSRQ version {version}")
    if not 2 <= b <= 8:
        raise FormatError(f"{path!r}: bit-width {b} outside [2, 8]")
    if ndim < 1:
        raise FormatError(f"{path!r}: ndim must be >= 1")
    dims, off = take(f"<{ndim}Q", off)
    if any(d == 0 for d in dims):
        raise FormatError(f"{path!r}: zero dimension in {dims}")
    (pad_orig,), off = take("<Q", off)
    if pad_orig:
        if next_pow2(pad_orig) != dims[-1]:
            raise FormatError(
                f"{path!r}: stored last dim {dims[-1]} is not next_pow2({pad_orig})"
            )
        pad = PadInfo(int(pad_orig), int(dims[-1]))
        shape = tuple(int(d) for d in dims[:-1]) + (int(pad_orig),)
    else:
        pad = None
        shape = tuple(int(d) for d in dims)
    (l, u, alpha, beta), off = take("<4d", off)
    try:
        params = QuantParams(int(b), l, u, alpha, beta)
    except ValueError as exc:
        raise FormatError(f"{path!r}: invalid quantizer parameters: {exc}") from exc
    (mask_present,), off = take("<B", off)
    numel = 1
    for d in dims:
        numel *= d
    mask = None
    if mask_present:
        nbytes = (numel + 7) // 8
        if len(blob) < off + nbytes:
            raise FormatError(f"{path!r}: truncated mask")
        mask = _unpack_bits(blob[off : off + nbytes], numel, 1).astype(np.bool_)
        off += nbytes
    (code_count,), off = take("<Q", off)
    expected_count = int(mask.sum()) if mask is not None else numel
    if code_count != expected_count:
        raise FormatError(
            f"{path!r}: code_count {code_count} does not match {expected_count}"
        )
    code_bytes = (code_count * b + 7) // 8
    if len(blob) != off + code_bytes:
        raise FormatError(f"{path!r}: expected {code_bytes} code bytes")
    return PackedTensor(params, shape, pad, blob[off:], mask, bool(had))
