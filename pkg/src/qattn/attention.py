"""Attention engines: dense oracle, tiled online-softmax, and the quantized pipeline.

Everything outside the emulated formats runs in float64 so emulation error is
not mixed with implementation error.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from ._fp22 import fp22_matmul
from .errors import ConfigError
from .formats import get_format, truncate_to_fp22
from .quantize import (
    Granularity,
    GranularityKind,
    QuantizedTensor,
    Side,
    quantize,
    quantize_p_block,
    quantize_p_static,
)
from .smooth import (
    SmoothingState,
    baseline_hadamard,
    baseline_smoothquant,
    smooth_k,
    smooth_q,
    smooth_v,
)

QK_FORMATS = ("int4", "int8", "fp16", "none")
PV_FORMATS = ("e4m3", "e5m2", "int8", "fp16", "none")
ACCUMULATIONS = ("fp32-exact", "fp22-single-level", "fp22-two-level")
BASELINES = ("none", "smoothquant", "hadamard")
QK_GRANULARITIES = ("per-tensor", "per-block", "per-token", "per-thread")


@dataclass(frozen=True)
class AttentionConfig:
    b_q: int = 128
    b_kv: int = 64
    c_w: int = 4
    qk_format: str = "int4"
    qk_granularity: str = "per-thread"
    pv_format: str = "e4m3"
    p_scale: str = "static"
    accumulation: str = "fp22-two-level"
    # Products summed exactly between two FP22 truncations (1 = every FMA).
    fp22_chunk: int = 1
    smooth_q: bool = True
    smooth_k: bool = True
    smooth_v: bool = False
    baseline: str = "none"
    sq_alpha: float = 0.5
    hadamard_seed: int = 0
    causal: bool = False
    scale: float | None = None

    def __post_init__(self):
        if min(self.b_q, self.b_kv, self.c_w) < 1:
            raise ConfigError("b_q, b_kv and c_w must be positive")
        for name, allowed in (
            ("qk_format", QK_FORMATS),
            ("qk_granularity", QK_GRANULARITIES),
            ("pv_format", PV_FORMATS),
            ("accumulation", ACCUMULATIONS),
            ("baseline", BASELINES),
            ("p_scale", ("static", "block")),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r}; expected one of {allowed}")
        if self.accumulation != "fp32-exact" and self.pv_format not in ("e4m3", "e5m2"):
            raise ConfigError(f"{self.accumulation} requires an FP8 pv_format, got {self.pv_format!r}")
        if self.accumulation == "fp22-single-level" and self.p_scale == "block":
            raise ConfigError("per-block P scales need a full-precision buffer; use fp32-exact or fp22-two-level")
        if self.fp22_chunk < 1:
            raise ConfigError("fp22_chunk must be positive")
        if self.qk_granularity == "per-thread" and self.qk_format in ("int4", "int8"):
            self.granularity(Side.QUERY)  # validates divisibility

    @classmethod
    def full_precision(cls, **kw) -> "AttentionConfig":
        base = dict(
            qk_format="none", pv_format="none", accumulation="fp32-exact",
            smooth_q=False, smooth_k=False, smooth_v=False,
        )
        base.update(kw)
        return cls(**base)

    def softmax_scale(self, d: int) -> float:
        return self.scale if self.scale is not None else 1.0 / math.sqrt(d)

    def granularity(self, side: Side) -> Granularity:
        return Granularity(GranularityKind(self.qk_granularity), self.b_q, self.b_kv, self.c_w, side)

    def replace(self, **kw) -> "AttentionConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TileState:
    m: np.ndarray
    l: np.ndarray
    o: np.ndarray

    @classmethod
    def empty(cls, rows: int, d: int, dtype=np.float64) -> "TileState":
        return cls(np.full(rows, -np.inf), np.zeros(rows), np.zeros((rows, d), dtype=dtype))


def _check_qkv(q, k, v) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q, k, v = (np.asarray(t, dtype=np.float64) for t in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("Q, K, V must be 2-D (tokens x channels)")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"Q and K head dims differ: {q.shape[1]} vs {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"K and V token counts differ: {k.shape[0]} vs {v.shape[0]}")
    if q.shape[0] == 0 or k.shape[0] == 0:
        raise ValueError("empty attention input")
    return q, k, v


def _causal_mask(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return cols[None, :] > rows[:, None]


def attention_oracle(q, k, v, causal: bool = False, scale: float | None = None) -> np.ndarray:
    """Dense softmax attention in float64."""
    q, k, v = _check_qkv(q, k, v)
    if causal and q.shape[0] != k.shape[0]:
        raise ValueError("causal attention needs equal query and key lengths")
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    s = (q @ k.T) * scale
    if causal:
        s[_causal_mask(np.arange(q.shape[0]), np.arange(k.shape[0]))] = -np.inf
    s -= s.max(axis=1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=1, keepdims=True)
    return p @ v


def _kv_blocks(n_kv: int, b_kv: int, row_end: int | None):
    """Key block slices; with ``row_end`` set, blocks entirely past it are skipped."""
    stop = n_kv if row_end is None else min(n_kv, row_end)
    for start in range(0, stop, b_kv):
        yield slice(start, min(start + b_kv, n_kv))


def _online_softmax_step(st: TileState, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Update ``m`` and ``l`` for a new score block; return (rescale, p_tilde)."""
    m_new = np.maximum(st.m, s.max(axis=1))
    alpha = np.exp(st.m - m_new)  # exp(-inf) = 0 on the first block
    p = np.exp(s - m_new[:, None])
    st.l = alpha * st.l + p.sum(axis=1)
    st.m = m_new
    return alpha, p


def attention_tiled_fp(
    q, k, v, cfg: AttentionConfig | None = None,
    on_step: Callable[[int, int, TileState], None] | None = None,
) -> np.ndarray:
    """Block-tiled attention with online softmax, all in float64.

    ``on_step(i, j, state)`` is called after every (query block, key block)
    update, e.g. to inspect the running max and sum.
    """
    cfg = cfg or AttentionConfig.full_precision()
    q, k, v = _check_qkv(q, k, v)
    if cfg.causal and q.shape[0] != k.shape[0]:
        raise ValueError("causal attention needs equal query and key lengths")
    n_q, d = q.shape
    scale = cfg.softmax_scale(d)
    out = np.empty((n_q, v.shape[1]))
    for i, r0 in enumerate(range(0, n_q, cfg.b_q)):
        rows = slice(r0, min(r0 + cfg.b_q, n_q))
        ridx = np.arange(rows.start, rows.stop)
        st = TileState.empty(len(ridx), v.shape[1])
        for j, cols in enumerate(_kv_blocks(k.shape[0], cfg.b_kv, rows.stop if cfg.causal else None)):
            s = (q[rows] @ k[cols].T) * scale
            if cfg.causal:
                s[_causal_mask(ridx, np.arange(cols.start, cols.stop))] = -np.inf
            alpha, p = _online_softmax_step(st, s)
            st.o = alpha[:, None] * st.o + p @ v[cols]
            if on_step is not None:
                on_step(i, j, st)
        out[rows] = st.o / st.l[:, None]
    return out


def accumulate_pv(
    p_codes, v_codes, mode: str = "fp32-exact", acc=None, rescale=None, chunk: int = 1,
) -> np.ndarray:
    """Fold one key block's ``P_hat @ V_hat`` into the running accumulator.

    * ``fp32-exact``: float64 accumulation (exact for FP8 codes at these sizes).
    * ``fp22-single-level``: ``acc`` is itself the FP22 accumulator; it is
      rescaled, truncated, and the block's products are added into it with
      truncation after every product.
    * ``fp22-two-level``: the block product goes through a fresh FP22
      accumulator and is then added to the float32 buffer ``acc``.

    ``rescale`` is the per-row online-softmax factor applied to ``acc`` first.
    """
    p_codes = np.asarray(p_codes, dtype=np.float64)
    v_codes = np.asarray(v_codes, dtype=np.float64)
    shape = (p_codes.shape[0], v_codes.shape[1])
    if acc is None:
        acc = np.zeros(shape)
    alpha = np.ones(shape[0]) if rescale is None else np.asarray(rescale, dtype=np.float64)
    scaled = alpha[:, None] * np.asarray(acc, dtype=np.float64)
    if mode == "fp32-exact":
        return scaled + p_codes @ v_codes
    if mode == "fp22-two-level":
        r = fp22_matmul(p_codes, v_codes, chunk=chunk)
        return (scaled.astype(np.float32) + r).astype(np.float64)
    if mode == "fp22-single-level":
        start = truncate_to_fp22(scaled.astype(np.float32)).astype(np.float32)
        return fp22_matmul(p_codes, v_codes, start, chunk=chunk).astype(np.float64)
    raise ConfigError(f"unknown accumulation mode {mode!r}")


@dataclass
class Sage2Diagnostics:
    q_groups: int
    k_groups: int
    n_q_blocks: int
    n_kv_blocks: int
    q_scales: np.ndarray = field(repr=False)
    k_scales: np.ndarray = field(repr=False)
    v_scales: np.ndarray = field(repr=False)


def _quantize_qk(x: np.ndarray, cfg: AttentionConfig, side: Side) -> QuantizedTensor:
    g = cfg.granularity(side) if cfg.qk_format in ("int4", "int8") else Granularity(GranularityKind.PER_TENSOR, side=side)
    if cfg.qk_format == "none":
        return QuantizedTensor(x, np.ones(1), g, np.zeros(x.shape[0], dtype=np.int64), get_format("fp64"))
    return quantize(x, g, cfg.qk_format)


def _quantize_v(v: np.ndarray, cfg: AttentionConfig) -> QuantizedTensor:
    g = Granularity(GranularityKind.PER_CHANNEL)
    if cfg.pv_format == "none":
        return QuantizedTensor(v, np.ones(v.shape[1]), g, np.arange(v.shape[1]), get_format("fp64"))
    return quantize(v, g, cfg.pv_format)


def _quantize_p(p: np.ndarray, cfg: AttentionConfig) -> tuple[np.ndarray, float]:
    if cfg.pv_format == "none":
        return p, 1.0
    qp = (quantize_p_block if cfg.p_scale == "block" else quantize_p_static)(p, cfg.pv_format)
    return qp.codes, float(qp.scales[0])


def _static_p_scale(cfg: AttentionConfig) -> float:
    if cfg.pv_format in ("none", "fp16"):
        return 1.0
    return 1.0 / get_format(cfg.pv_format).quant_max


def attention_sage2(q, k, v, cfg: AttentionConfig | None = None):
    """Quantized attention: smooth, quantize, tiled online softmax, correct.

    Returns ``(output, smoothing_state, diagnostics)``.
    """
    cfg = cfg or AttentionConfig()
    q, k, v = _check_qkv(q, k, v)
    if cfg.causal and q.shape[0] != k.shape[0]:
        raise ValueError("causal attention needs equal query and key lengths")
    n_q, d = q.shape
    n_kv = k.shape[0]
    scale = cfg.softmax_scale(d)

    if cfg.baseline == "smoothquant":
        q, k = baseline_smoothquant(q, k, cfg.sq_alpha)
    elif cfg.baseline == "hadamard":
        q, k = baseline_hadamard(q, k, cfg.hadamard_seed)

    n_qb = -(-n_q // cfg.b_q)
    k_s, k_bar = smooth_k(k) if cfg.smooth_k else (k, np.zeros(d))
    q_s, q_bar = smooth_q(q, cfg.b_q) if cfg.smooth_q else (q, np.zeros((n_qb, d)))
    v_s, v_mean = smooth_v(v) if cfg.smooth_v else (v, None)
    delta_s = q_bar @ k_s.T if cfg.smooth_q else np.zeros((n_qb, n_kv))
    state = SmoothingState(q_bar, k_bar, v_mean, delta_s, cfg.smooth_q, cfg.smooth_k, cfg.smooth_v)

    qq = _quantize_qk(q_s, cfg, Side.QUERY)
    kq = _quantize_qk(k_s, cfg, Side.KEY)
    vq = _quantize_v(v_s, cfg)
    q_rs, k_rs = qq.row_scales(), kq.row_scales()
    v_scale = vq.scales[vq.group_of]
    two_level = cfg.accumulation == "fp22-two-level"
    block_p = cfg.p_scale == "block"
    # Static P scale is folded in once at the end; block scales are applied per block.
    final_scale = v_scale if block_p else _static_p_scale(cfg) * v_scale

    out = np.empty((n_q, v.shape[1]))
    for i, r0 in enumerate(range(0, n_q, cfg.b_q)):
        rows = slice(r0, min(r0 + cfg.b_q, n_q))
        ridx = np.arange(rows.start, rows.stop)
        st = TileState.empty(len(ridx), v.shape[1])
        for cols in _kv_blocks(n_kv, cfg.b_kv, rows.stop if cfg.causal else None):
            # Integer codes: the float64 product is exact (|partial sums| << 2**53).
            s = (qq.codes[rows] @ kq.codes[cols].T) * np.outer(q_rs[rows], k_rs[cols])
            s = (s + delta_s[i, cols]) * scale
            if cfg.causal:
                s[_causal_mask(ridx, np.arange(cols.start, cols.stop))] = -np.inf
            alpha, p = _online_softmax_step(st, s)
            p_codes, p_scale = _quantize_p(p, cfg)
            if block_p:
                st.o = alpha[:, None] * st.o + p_scale * _block_product(p_codes, vq.codes[cols], cfg)
                if two_level:
                    st.o = st.o.astype(np.float32).astype(np.float64)
            else:
                st.o = accumulate_pv(p_codes, vq.codes[cols], cfg.accumulation, st.o, alpha, cfg.fp22_chunk)
        out[rows] = st.o / st.l[:, None] * final_scale
    if v_mean is not None:
        out += v_mean

    diag = Sage2Diagnostics(
        q_groups=len(qq.scales), k_groups=len(kq.scales), n_q_blocks=n_qb,
        n_kv_blocks=-(-n_kv // cfg.b_kv), q_scales=qq.scales, k_scales=kq.scales, v_scales=vq.scales,
    )
    return out, state, diag


def _block_product(p_codes: np.ndarray, v_codes: np.ndarray, cfg: AttentionConfig) -> np.ndarray:
    if cfg.accumulation == "fp22-two-level":
        return fp22_matmul(p_codes, v_codes, chunk=cfg.fp22_chunk).astype(np.float64)
    return p_codes @ v_codes
