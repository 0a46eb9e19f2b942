"""Bit-accurate emulation of the low-precision number formats.

Every cast returns values widened to float64, so results of different
formats can be mixed without introducing further rounding.  Rounding is
round-to-nearest-even everywhere; FP8 and FP16 saturate at their largest
finite magnitude instead of producing infinities.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import QuantizationError

# Low 10 bits of a binary32 mantissa; clearing them leaves 13 mantissa bits.
FP22_MASK = np.uint32(0xFFFFFC00)


class FormatKind(str, enum.Enum):
    INT4 = "int4"
    INT8 = "int8"
    FP8_E4M3 = "e4m3"
    FP8_E5M2 = "e5m2"
    FP16 = "fp16"
    FP22 = "fp22"
    FP32 = "fp32"
    FP64 = "fp64"


@dataclass(frozen=True)
class LowPrecisionFormat:
    kind: FormatKind
    exponent_bits: int = 0
    mantissa_bits: int = 0
    max_code: int = 0
    max_finite: float = 0.0

    @property
    def is_int(self) -> bool:
        return self.kind in (FormatKind.INT4, FormatKind.INT8)

    @property
    def is_fp8(self) -> bool:
        return self.kind in (FormatKind.FP8_E4M3, FormatKind.FP8_E5M2)

    @property
    def bias(self) -> int:
        return (1 << (self.exponent_bits - 1)) - 1

    @property
    def min_exponent(self) -> int:
        """Unbiased exponent of the smallest normal number."""
        return 1 - self.bias

    @property
    def quant_max(self) -> float:
        """Largest magnitude a scaled quantizer maps the group maximum to."""
        if self.is_int:
            return float(self.max_code)
        return self.max_finite

    def cast(self, x) -> np.ndarray:
        k = self.kind
        if k is FormatKind.INT4 or k is FormatKind.INT8:
            return round_to_int(x, self.max_code).astype(np.float64)
        if k is FormatKind.FP8_E4M3 or k is FormatKind.FP8_E5M2:
            return cast_fp8(x, k)
        if k is FormatKind.FP16:
            return cast_fp16(x)
        if k is FormatKind.FP22:
            return truncate_to_fp22(np.asarray(x, dtype=np.float32))
        if k is FormatKind.FP32:
            return np.asarray(x, dtype=np.float32).astype(np.float64)
        return np.asarray(x, dtype=np.float64)


INT4 = LowPrecisionFormat(FormatKind.INT4, max_code=7)
INT8 = LowPrecisionFormat(FormatKind.INT8, max_code=127)
E4M3 = LowPrecisionFormat(FormatKind.FP8_E4M3, 4, 3, max_finite=448.0)
E5M2 = LowPrecisionFormat(FormatKind.FP8_E5M2, 5, 2, max_finite=57344.0)
FP16 = LowPrecisionFormat(FormatKind.FP16, 5, 10, max_finite=65504.0)
FP22 = LowPrecisionFormat(FormatKind.FP22, 8, 13, max_finite=float(np.finfo(np.float32).max))
FP32 = LowPrecisionFormat(FormatKind.FP32, 8, 23, max_finite=float(np.finfo(np.float32).max))
FP64 = LowPrecisionFormat(FormatKind.FP64, 11, 52, max_finite=float(np.finfo(np.float64).max))

FORMATS = {f.kind.value: f for f in (INT4, INT8, E4M3, E5M2, FP16, FP22, FP32, FP64)}


def get_format(name: str | FormatKind | LowPrecisionFormat) -> LowPrecisionFormat:
    if isinstance(name, LowPrecisionFormat):
        return name
    key = name.value if isinstance(name, FormatKind) else str(name).lower()
    try:
        return FORMATS[key]
    except KeyError:
        raise ValueError(f"unknown format {name!r}; expected one of {sorted(FORMATS)}") from None


def _require_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise QuantizationError("non-finite quantization input")


def round_to_int(x, max_code: int):
    """Round half to even, then clamp to ``[-max_code, max_code]``.

    Scalars in give Python ints out; arrays give int64 arrays.
    """
    arr = np.asarray(x, dtype=np.float64)
    _require_finite(arr)
    out = np.clip(np.rint(arr), -max_code, max_code).astype(np.int64)
    if out.ndim == 0:
        return int(out)
    return out


def _round_binary(x, mantissa_bits: int, min_exponent: int, max_finite: float) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    _require_finite(arr)
    mag = np.abs(arr)
    # frexp: mag = m * 2**e with m in [0.5, 1), so the binade exponent is e - 1.
    _, e = np.frexp(mag)
    exp = np.maximum(e - 1, min_exponent)
    ulp = np.ldexp(1.0, exp - mantissa_bits)
    # Division by a power of two is exact; rint is round-half-to-even.
    rounded = np.minimum(np.rint(mag / ulp) * ulp, max_finite)
    return np.copysign(rounded, arr)


def cast_fp8(x, variant: str | FormatKind = FormatKind.FP8_E4M3) -> np.ndarray:
    """Nearest FP8 value (E4M3 or E5M2), saturating on overflow."""
    fmt = get_format(variant)
    if not fmt.is_fp8:
        raise ValueError(f"not an FP8 variant: {variant!r}")
    return _round_binary(x, fmt.mantissa_bits, fmt.min_exponent, fmt.max_finite)


def cast_fp16(x) -> np.ndarray:
    """Nearest IEEE half-precision value, saturating at +-65504."""
    return _round_binary(x, FP16.mantissa_bits, FP16.min_exponent, FP16.max_finite)


def truncate_to_fp22(x) -> np.ndarray:
    """Zero the 10 low mantissa bits of binary32 values.

    ``x`` must already be representable in single precision; it is viewed as
    float32 and the result is widened back to float64.  NaN and Inf are left
    untouched (their exponent field is all ones and survives the mask; a NaN
    payload living only in the low bits is preserved explicitly).
    """
    f = np.array(x, dtype=np.float32, order="C", ndmin=1)
    out = (f.view(np.uint32) & FP22_MASK).view(np.float32)
    out = np.where(np.isfinite(f), out, f)
    with np.errstate(invalid="ignore"):
        out = out.astype(np.float64)
    return out.reshape(np.shape(x))


def decode_fp8(code: int, variant: str | FormatKind = FormatKind.FP8_E4M3) -> float:
    """Value of an 8-bit pattern, NaN for NaN encodings.

    E4M3 follows the finite-only convention (S.1111.111 is NaN, no
    infinities); E5M2 is IEEE-like (exponent 11111 is Inf/NaN).
    """
    fmt = get_format(variant)
    code &= 0xFF
    mbits, ebits = fmt.mantissa_bits, fmt.exponent_bits
    sign = -1.0 if code >> 7 else 1.0
    exp_field = (code >> mbits) & ((1 << ebits) - 1)
    mant = code & ((1 << mbits) - 1)
    if fmt.kind is FormatKind.FP8_E4M3:
        if exp_field == 0xF and mant == 0x7:
            return float("nan")
    elif exp_field == (1 << ebits) - 1:
        return sign * float("inf") if mant == 0 else float("nan")
    if exp_field == 0:
        return sign * mant * 2.0 ** (fmt.min_exponent - mbits)
    return sign * (1.0 + mant / (1 << mbits)) * 2.0 ** (exp_field - fmt.bias)


def fp8_values(variant: str | FormatKind = FormatKind.FP8_E4M3) -> np.ndarray:
    """All 256 decoded values of a variant (NaN/Inf included), indexed by code."""
    return np.array([decode_fp8(c, variant) for c in range(256)])
