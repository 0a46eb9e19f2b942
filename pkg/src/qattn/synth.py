"""Synthetic Q/K/V generation and the binary tensor file format.

Tokens are i.i.d. Gaussian with per-channel mean and standard deviation.
Outlier channels of Q and K get a large channel *mean* (every token shares
it), which is the pattern mean subtraction removes.  V can carry a uniform
positive channel bias.

File layout (little-endian)::

    b"QATN" | u32 version=1 | u8 dtype (0=f64, 1=f32) | u32 rank | u64 dims[rank] | data
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, DimensionOverflowError, TensorFileError, TruncatedFileError


@dataclass(frozen=True)
class OutlierSpec:
    channels: int = 4
    multiplier: float = 20.0
    # K outliers are `multiplier * k_ratio` standard deviations.
    k_ratio: float = 0.5
    # Q and K put their outliers on the same channels.
    shared: bool = True

    def __post_init__(self):
        if self.channels < 0:
            raise ConfigError("outlier channel count must be non-negative")
        if self.multiplier < 1.0:
            raise ConfigError("outlier multiplier must be >= 1")
        if self.k_ratio < 0.0:
            raise ConfigError("k_ratio must be non-negative")


@dataclass(frozen=True)
class GenSpec:
    n_tokens: int = 1024
    head_dim: int = 64
    seed: int = 0
    mean: float = 0.0
    mean_spread: float = 1.0
    std: float = 0.5
    std_spread: float = 0.5
    outliers: OutlierSpec = field(default_factory=OutlierSpec)
    v_bias: tuple[float, float] | None = None
    # Leading keys every query attends to strongly (score raised by sink_logit).
    sink_tokens: int = 1
    sink_logit: float = 6.0
    # Sink values are scaled by this factor (sinks act as near no-op keys).
    sink_value_scale: float = 0.0

    def __post_init__(self):
        if self.sink_tokens < 0 or self.sink_tokens > self.n_tokens:
            raise ConfigError("sink_tokens must lie in [0, n_tokens]")
        if self.n_tokens < 1 or self.head_dim < 1:
            raise ConfigError("n_tokens and head_dim must be >= 1")
        if self.std <= 0 or not 0 <= self.std_spread < 1:
            raise ConfigError("std must be positive and std_spread in [0, 1)")
        if isinstance(self.outliers, dict):
            object.__setattr__(self, "outliers", OutlierSpec(**self.outliers))
        if self.outliers.channels > self.head_dim:
            raise ConfigError("more outlier channels than head_dim")
        if self.v_bias is not None:
            lo, hi = self.v_bias
            if lo > hi:
                raise ConfigError("v_bias must be (low, high) with low <= high")
            object.__setattr__(self, "v_bias", (float(lo), float(hi)))

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        if not isinstance(d, dict):
            raise ConfigError("GenSpec must be given as a mapping")
        d = dict(d)
        if "outliers" in d and isinstance(d["outliers"], dict):
            bad = set(d["outliers"]) - set(OutlierSpec.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown outlier keys: {sorted(bad)}")
            d["outliers"] = OutlierSpec(**d["outliers"])
        if d.get("v_bias") is not None:
            d["v_bias"] = tuple(d["v_bias"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown GenSpec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "GenSpec":
        return GenSpec.from_dict({**self.to_dict(), "seed": seed})


def _gaussian_tokens(rng: np.random.Generator, spec: GenSpec, multiplier: float, chans=None):
    n, d = spec.n_tokens, spec.head_dim
    mu = spec.mean + spec.mean_spread * rng.standard_normal(d)
    sigma = spec.std * rng.uniform(1 - spec.std_spread, 1 + spec.std_spread, d)
    if chans is None:
        chans = np.sort(rng.choice(d, size=spec.outliers.channels, replace=False))
    mu[chans] = rng.choice([-1.0, 1.0], size=chans.size) * multiplier * spec.std
    return mu + sigma * rng.standard_normal((n, d)), mu, chans


def gen_qkv(spec: GenSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic (Q, K, V) for ``spec``."""
    q, k, v, _ = gen_qkv_with_channels(spec)
    return q, k, v


def gen_qkv_with_channels(spec: GenSpec):
    """As :func:`gen_qkv`, also returning the outlier channel indices of Q and K."""
    rng = np.random.default_rng(spec.seed)
    q, q_mu, q_ch = _gaussian_tokens(rng, spec, spec.outliers.multiplier)
    shared = q_ch if spec.outliers.shared else None
    k, _, k_ch = _gaussian_tokens(rng, spec, spec.outliers.multiplier * spec.outliers.k_ratio, shared)
    if spec.sink_tokens:
        # Shift along the query mean so q . dk / sqrt(d) ~= sink_logit for a typical query.
        dk = spec.sink_logit * np.sqrt(spec.head_dim) * q_mu / (q_mu @ q_mu)
        k[: spec.sink_tokens] += dk
    n, d = spec.n_tokens, spec.head_dim
    v_sigma = spec.std * rng.uniform(1 - spec.std_spread, 1 + spec.std_spread, d)
    v = v_sigma * rng.standard_normal((n, d))
    v[: spec.sink_tokens] *= spec.sink_value_scale
    if spec.v_bias is not None:
        v += rng.uniform(*spec.v_bias, size=d)
    return q, k, v, {"q": q_ch, "k": k_ch}


MAGIC = b"QATN"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_HEADER = struct.Struct("<4sIBI")
MAX_RANK = 32


def save_tensor(path, x) -> None:
    x = np.asarray(x)
    if x.dtype == np.float32:
        code = 1
    else:
        code, x = 0, x.astype(np.float64, copy=False)
    dtype = _DTYPES[code]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, code, x.ndim))
        fh.write(struct.pack(f"<{x.ndim}Q", *x.shape))
        fh.write(np.ascontiguousarray(x, dtype=dtype).tobytes())


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError(f"{path}: truncated file (no header)")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated file (short header)")
    _, version, code, rank = _HEADER.unpack_from(data)
    if version != VERSION:
        raise TensorFileError(f"{path}: unsupported version {version}")
    if code not in _DTYPES:
        raise TensorFileError(f"{path}: unknown dtype code {code}")
    if rank > MAX_RANK:
        raise DimensionOverflowError(f"{path}: rank {rank} exceeds {MAX_RANK}")
    off = _HEADER.size
    if len(data) < off + 8 * rank:
        raise TruncatedFileError(f"{path}: truncated file (dims)")
    dims = struct.unpack_from(f"<{rank}Q", data, off)
    off += 8 * rank
    dtype = _DTYPES[code]
    count = 1
    for dim in dims:
        count *= dim
    if count * dtype.itemsize > 2**63 - 1:
        raise DimensionOverflowError(f"{path}: dimensions {dims} overflow")
    need = count * dtype.itemsize
    if len(data) - off < need:
        raise TruncatedFileError(f"{path}: truncated file (expected {need} data bytes, found {len(data) - off})")
    return np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(dims).copy()
