"""Bit-exact quantized weight storage and the bit-flip mechanics built on it.

Three code formats are supported:

* ``INT8``    - raw byte of a two's-complement int8, value = scale * int8(code)
* ``NF4``     - 4-bit index into the normal-float codebook, value = scale * level
* ``TERNARY`` - 2-bit code ``0b00 -> 0``, ``0b01 -> +1``, ``0b11 -> -1``

Codes are stored row-major, flat index ``i = row * cols + col``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

NF4_CODEBOOK = np.array(
    [
        -1.0, -0.6962, -0.5251, -0.3949, -0.2844, -0.1848, -0.0911, 0.0,
        0.0796, 0.1609, 0.2461, 0.3379, 0.4407, 0.5626, 0.7230, 1.0,
    ],
    dtype=np.float64,
)

# index = code; 0b10 is not a valid stored code
_TERNARY_VALUES = np.array([0.0, 1.0, 0.0, -1.0], dtype=np.float64)
_TERNARY_INVALID = 0b10
_TERNARY_NEG = 0b11


class QuantFormat(enum.Enum):
    INT8 = "int8"
    NF4 = "nf4"
    TERNARY = "ternary"

    @property
    def width(self) -> int:
        """Code width in bits."""
        return _WIDTHS[self]

    @property
    def zero_code(self) -> int:
        """Code that dequantizes to exactly 0.0."""
        return _ZERO_CODES[self]


_WIDTHS = {QuantFormat.INT8: 8, QuantFormat.NF4: 4, QuantFormat.TERNARY: 2}
_ZERO_CODES = {QuantFormat.INT8: 0x00, QuantFormat.NF4: 7, QuantFormat.TERNARY: 0b00}


class QuantError(ValueError):
    """Invalid code, shape, index or bit position."""


def default_flip_position(fmt: QuantFormat) -> int:
    """MSB of the format's code."""
    return fmt.width - 1


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Per-tensor scaled code matrix. Treated as immutable once built."""

    format: QuantFormat
    shape: tuple[int, int]
    codes: np.ndarray
    scale: float
    _dense: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        rows, cols = (int(v) for v in self.shape)
        if rows <= 0 or cols <= 0:
            raise QuantError(f"shape must be positive, got {self.shape}")
        codes = np.asarray(self.codes)
        if codes.ndim != 1:
            codes = codes.reshape(-1)
        if codes.size != rows * cols:
            raise QuantError(f"expected {rows * cols} codes for shape {self.shape}, got {codes.size}")
        if codes.size and (codes.min() < 0 or codes.max() >= (1 << self.format.width)):
            bad = int(np.flatnonzero((codes < 0) | (codes >= (1 << self.format.width)))[0])
            raise QuantError(f"code {int(codes[bad])} at index {bad} out of range for {self.format.value}")
        codes = codes.astype(np.uint8)
        if self.format is QuantFormat.TERNARY:
            bad = np.flatnonzero(codes == _TERNARY_INVALID)
            if bad.size:
                raise QuantError(f"ternary code 0b10 is invalid (index {int(bad[0])})")
        scale = float(self.scale)
        if not np.isfinite(scale) or scale <= 0:
            raise QuantError(f"scale must be positive and finite, got {self.scale}")
        codes.setflags(write=False)
        object.__setattr__(self, "shape", (rows, cols))
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "scale", scale)

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def bits(self) -> int:
        return self.size * self.format.width

    def dense(self) -> np.ndarray:
        """Dequantized (rows, cols) float64 matrix; cached, read-only."""
        if self._dense is None:
            values = dequantize_codes(self.format, self.codes, self.scale).reshape(self.shape)
            values.setflags(write=False)
            object.__setattr__(self, "_dense", values)
        return self._dense

    def with_codes(self, codes: np.ndarray) -> "QuantizedTensor":
        return QuantizedTensor(self.format, self.shape, codes, self.scale)

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.format is other.format
            and self.shape == other.shape
            and self.scale == other.scale
            and np.array_equal(self.codes, other.codes)
        )

    __hash__ = None


def dequantize_codes(fmt: QuantFormat, codes: np.ndarray, scale: float) -> np.ndarray:
    """Vectorised dequantization of raw codes."""
    codes = np.asarray(codes, dtype=np.uint8)
    if fmt is QuantFormat.INT8:
        return scale * codes.view(np.int8).astype(np.float64)
    if fmt is QuantFormat.NF4:
        return scale * NF4_CODEBOOK[codes]
    return scale * _TERNARY_VALUES[codes]


def _check_index(t: QuantizedTensor, i: int) -> int:
    i = int(i)
    if not 0 <= i < t.size:
        raise QuantError(f"index {i} out of range for tensor of size {t.size}")
    return i


def _check_pos(fmt: QuantFormat, pos: int) -> int:
    pos = int(pos)
    if not 0 <= pos < fmt.width:
        raise QuantError(f"bit position {pos} invalid for {fmt.value} (width {fmt.width})")
    return pos


def dequantize(t: QuantizedTensor, i: int) -> float:
    i = _check_index(t, i)
    return float(dequantize_codes(t.format, t.codes[i : i + 1], t.scale)[0])


def flip_codes(fmt: QuantFormat, codes: np.ndarray, indices: Sequence[int] | np.ndarray, pos: int) -> np.ndarray:
    """Return a copy of ``codes`` with bit ``pos`` XOR-ed at every index.

    Ternary results of ``0b10`` are clamped to ``0b11``.
    """
    pos = _check_pos(fmt, pos)
    out = np.array(codes, dtype=np.uint8, copy=True)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size == 0:
        return out
    if idx.min() < 0 or idx.max() >= out.size:
        raise QuantError(f"flip index out of range for tensor of size {out.size}")
    out[idx] ^= np.uint8(1 << pos)
    if fmt is QuantFormat.TERNARY:
        out[idx] = np.where(out[idx] == _TERNARY_INVALID, _TERNARY_NEG, out[idx])
    return out


def flip_bit(t: QuantizedTensor, i: int, pos: int) -> QuantizedTensor:
    """New tensor with one code's bit flipped; ``t`` is left untouched."""
    i = _check_index(t, i)
    return t.with_codes(flip_codes(t.format, t.codes, [i], pos))


def flipped_dense(t: QuantizedTensor, indices: Iterable[int], pos: int) -> np.ndarray:
    """Dequantized matrix with flips applied virtually (stored codes unchanged)."""
    indices = list(indices)
    if not indices:
        return t.dense()
    dense = t.dense().reshape(-1).copy()
    idx = np.asarray(indices, dtype=np.intp)
    if idx.min() < 0 or idx.max() >= t.size:
        raise QuantError(f"flip index out of range for tensor of size {t.size}")
    flipped = flip_codes(t.format, t.codes[idx], np.arange(idx.size), pos)
    dense[idx] = dequantize_codes(t.format, flipped, t.scale)
    return dense.reshape(t.shape)


def quantize(values: np.ndarray, fmt: QuantFormat) -> QuantizedTensor:
    """Absmax per-tensor quantization of a float matrix (absmean for ternary)."""
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 2:
        raise QuantError("quantize expects a 2-D matrix")
    mag = np.abs(w)
    if fmt is QuantFormat.INT8:
        scale = float(mag.max()) / 127.0 or 1.0
        q = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
        codes = q.view(np.uint8)
    elif fmt is QuantFormat.NF4:
        scale = float(mag.max()) or 1.0
        codes = np.abs(w[..., None] / scale - NF4_CODEBOOK).argmin(axis=-1).astype(np.uint8)
    else:
        scale = float(mag.mean()) or 1.0
        q = np.clip(np.rint(w / scale), -1, 1).astype(np.int64)
        codes = np.select([q == 1, q == -1], [0b01, 0b11], 0b00).astype(np.uint8)
    return QuantizedTensor(fmt, w.shape, codes.reshape(-1), scale)
