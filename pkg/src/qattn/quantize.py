"""Symmetric quantizers at tensor, block, token, channel and thread granularity.

A quantization group is a set of tokens (rows) sharing one scale, except for
per-channel granularity where groups are columns.  Per-thread groups follow
the accumulator fragment layout of the INT4/INT8 ``mma.m16n8k64``
instruction: within a warp's query tile, rows ``t, t+8, t+16, ...`` land in
the same thread, and within a key block, columns ``8k+2i`` and ``8k+2i+1``
land in the same thread.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, QuantizationError
from .formats import E4M3, LowPrecisionFormat, get_format

SCALE_FLOOR = 1e-30
MMA_ROWS = 8  # distinct row groups per warp tile (row i and i+8 share a thread)
KEY_GROUPS = 4  # column pairs per 8-column mma tile


class GranularityKind(str, enum.Enum):
    PER_TENSOR = "per-tensor"
    PER_BLOCK = "per-block"
    PER_TOKEN = "per-token"
    PER_CHANNEL = "per-channel"
    PER_THREAD = "per-thread"


class Side(str, enum.Enum):
    QUERY = "query"
    KEY = "key"


@dataclass(frozen=True)
class Granularity:
    kind: GranularityKind = GranularityKind.PER_THREAD
    b_q: int = 128
    b_kv: int = 64
    c_w: int = 4
    side: Side = Side.QUERY

    def __post_init__(self):
        object.__setattr__(self, "kind", GranularityKind(self.kind))
        object.__setattr__(self, "side", Side(self.side))
        if min(self.b_q, self.b_kv, self.c_w) < 1:
            raise ConfigError("block sizes and warp count must be positive")
        if self.kind is GranularityKind.PER_THREAD:
            _check_per_thread(self.b_q, self.b_kv, self.c_w)

    @property
    def block(self) -> int:
        return self.b_q if self.side is Side.QUERY else self.b_kv

    @property
    def by_channel(self) -> bool:
        return self.kind is GranularityKind.PER_CHANNEL

    def group_of(self, n: int) -> np.ndarray:
        """Group id of each of ``n`` tokens (channels for per-channel)."""
        idx = np.arange(n)
        k = self.kind
        if k is GranularityKind.PER_TENSOR:
            return np.zeros(n, dtype=np.int64)
        if k is GranularityKind.PER_TOKEN or k is GranularityKind.PER_CHANNEL:
            return idx
        if k is GranularityKind.PER_BLOCK:
            return idx // self.block
        return group_assign_per_thread(idx, self.side, self.b_q, self.b_kv, self.c_w)

    def n_groups(self, n: int) -> int:
        k = self.kind
        if k is GranularityKind.PER_TENSOR:
            return 1
        if k is GranularityKind.PER_TOKEN or k is GranularityKind.PER_CHANNEL:
            return n
        n_blocks = -(-n // self.block)
        if k is GranularityKind.PER_BLOCK:
            return n_blocks
        return n_blocks * groups_per_block(self.side, self.c_w)


def _check_per_thread(b_q: int, b_kv: int, c_w: int) -> None:
    if b_q % c_w:
        raise ConfigError(f"b_q={b_q} is not divisible by c_w={c_w}")
    if (b_q // c_w) % MMA_ROWS:
        raise ConfigError(f"warp tile b_q/c_w={b_q // c_w} is not a multiple of {MMA_ROWS}")
    if b_kv % 8:
        raise ConfigError(f"b_kv={b_kv} is not a multiple of 8")


def groups_per_block(side: Side | str, c_w: int) -> int:
    return MMA_ROWS * c_w if Side(side) is Side.QUERY else KEY_GROUPS


def group_assign_per_thread(n, side: Side | str, b_q: int = 128, b_kv: int = 64, c_w: int = 4):
    """Per-thread group id of token index ``n`` (scalar or integer array).

    Query side: ``block * 8*c_w + warp * 8 + (t mod 8)`` with ``t`` the offset
    in the block and ``warp = t // (b_q / c_w)``.  Key side:
    ``block * 4 + (t mod 8) // 2``.
    """
    _check_per_thread(b_q, b_kv, c_w)
    side = Side(side)
    n = np.asarray(n, dtype=np.int64)
    if np.any(n < 0):
        raise ConfigError("token index must be non-negative")
    if side is Side.QUERY:
        block, t = np.divmod(n, b_q)
        warp = t // (b_q // c_w)
        gid = block * (MMA_ROWS * c_w) + warp * MMA_ROWS + t % MMA_ROWS
    else:
        block, t = np.divmod(n, b_kv)
        gid = block * KEY_GROUPS + (t % 8) // 2
    return int(gid) if gid.ndim == 0 else gid


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    granularity: Granularity
    group_of: np.ndarray
    format: LowPrecisionFormat = field(default=E4M3)

    def element_scales(self) -> np.ndarray:
        """Scale broadcastable against ``codes``."""
        s = self.scales[self.group_of]
        return s[None, :] if self.granularity.by_channel else s[:, None]

    def row_scales(self) -> np.ndarray:
        if self.granularity.by_channel:
            raise ValueError("per-channel tensors have no per-row scale")
        return self.scales[self.group_of]


def _as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("non-finite quantization input")
    return arr


def _unscaled(fmt: LowPrecisionFormat) -> bool:
    return not (fmt.is_int or fmt.is_fp8)


def compute_scales(x, g: Granularity, fmt) -> np.ndarray:
    """One positive scale per group: ``max|group| / quant_max``.

    Formats without a scaled quantizer (FP16 and wider) get unit scales.
    """
    x = _as_matrix(x)
    fmt = get_format(fmt)
    n_tok, n_ch = x.shape
    n = n_ch if g.by_channel else n_tok
    if _unscaled(fmt):
        return np.ones(g.n_groups(n))
    absmax = np.abs(x).max(axis=0 if g.by_channel else 1, initial=0.0)
    gmax = np.zeros(g.n_groups(n))
    np.maximum.at(gmax, g.group_of(n), absmax)
    return np.maximum(gmax, SCALE_FLOOR) / fmt.quant_max


def quantize(x, g: Granularity, fmt) -> QuantizedTensor:
    x = _as_matrix(x)
    fmt = get_format(fmt)
    scales = compute_scales(x, g, fmt)
    n = x.shape[1] if g.by_channel else x.shape[0]
    groups = g.group_of(n)
    s = scales[groups]
    s = s[None, :] if g.by_channel else s[:, None]
    return QuantizedTensor(fmt.cast(x / s), scales, g, groups, fmt)


def dequantize(qt: QuantizedTensor) -> np.ndarray:
    return qt.codes * qt.element_scales()


P_TOLERANCE = 1e-6


def quantize_p_static(p, fmt=E4M3) -> QuantizedTensor:
    """Quantize unnormalized probabilities in [0, 1] with the fixed scale ``1/quant_max``.

    For E4M3 this is ``cast(448 * p)`` with scale 1/448.
    """
    p = _as_matrix(p)
    fmt = get_format(fmt)
    if p.size and (p.min() < -P_TOLERANCE or p.max() > 1.0 + P_TOLERANCE):
        raise QuantizationError("unnormalized probability out of range")
    p = np.clip(p, 0.0, 1.0)
    g = Granularity(GranularityKind.PER_TENSOR)
    if _unscaled(fmt):
        return QuantizedTensor(fmt.cast(p), np.ones(1), g, np.zeros(p.shape[0], dtype=np.int64), fmt)
    scale = 1.0 / fmt.quant_max
    codes = fmt.cast(p * fmt.quant_max)
    return QuantizedTensor(codes, np.array([scale]), g, np.zeros(p.shape[0], dtype=np.int64), fmt)


def quantize_p_block(p, fmt=E4M3) -> QuantizedTensor:
    """Per-block alternative: scale from the block's own maximum."""
    p = _as_matrix(p)
    if p.size and (p.min() < -P_TOLERANCE or p.max() > 1.0 + P_TOLERANCE):
        raise QuantizationError("unnormalized probability out of range")
    return quantize(np.clip(p, 0.0, 1.0), Granularity(GranularityKind.PER_TENSOR), fmt)
