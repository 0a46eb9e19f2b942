"""Mean-subtraction smoothing for Q, K, V and the baseline transforms.

Smoothing K by its global mean only adds a per-row constant to the scores,
which softmax ignores.  Smoothing Q per block needs the correction
``delta_s = q_bar_i @ K_j'^T``, added back after dequantizing the product of
the smoothed tensors.  Smoothing V is undone by adding the channel mean to
the normalized output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from .errors import ConfigError
from .quantize import SCALE_FLOOR


@dataclass
class SmoothingState:
    q_bar: np.ndarray  # (n_q_blocks, d)
    k_bar: np.ndarray  # (d,)
    v_mean: np.ndarray | None  # (d,)
    delta_s: np.ndarray  # (n_q_blocks, N): row i holds delta_s for every key block
    smooth_q: bool = False
    smooth_k: bool = False
    smooth_v: bool = False

    def delta_s_block(self, i: int, cols: slice) -> np.ndarray:
        return self.delta_s[i, cols]


def _matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty tensor")
    return arr


def smooth_k(k) -> tuple[np.ndarray, np.ndarray]:
    k = _matrix(k)
    k_bar = k.mean(axis=0)
    return k - k_bar, k_bar


def smooth_q(q, b_q: int) -> tuple[np.ndarray, np.ndarray]:
    """Subtract each block's column mean; the last block may be short."""
    q = _matrix(q)
    if b_q < 1:
        raise ConfigError("b_q must be positive")
    n = q.shape[0]
    starts = np.arange(0, n, b_q)
    q_bar = np.add.reduceat(q, starts, axis=0) / np.diff(np.append(starts, n))[:, None]
    return q - np.repeat(q_bar, b_q, axis=0)[:n], q_bar


def compute_delta_s(q_bar_i, k_j) -> np.ndarray:
    return np.asarray(k_j, dtype=np.float64) @ np.asarray(q_bar_i, dtype=np.float64)


def smooth_v(v) -> tuple[np.ndarray, np.ndarray]:
    v = _matrix(v)
    v_mean = v.mean(axis=0)
    return v - v_mean, v_mean


def baseline_smoothquant(q, k, alpha: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel migration ``s_j = max|Q_j|^a / max|K_j|^(1-a)``; ``Q/s``, ``K*s``."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    q, k = _matrix(q), _matrix(k)
    qmax = np.maximum(np.abs(q).max(axis=0), SCALE_FLOOR)
    kmax = np.maximum(np.abs(k).max(axis=0), SCALE_FLOOR)
    s = qmax**alpha / kmax ** (1.0 - alpha)
    return q / s, k * s


def hadamard_rotation(d: int, seed: int = 0) -> np.ndarray:
    """Orthogonal ``diag(D) @ H / sqrt(d)`` with random signs ``D``."""
    if d < 1 or d & (d - 1):
        raise ConfigError(f"head dimension {d} is not a power of two")
    signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=d)
    return signs[:, None] * hadamard(d).astype(np.float64) / np.sqrt(d)


def baseline_hadamard(q, k, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    q, k = _matrix(q), _matrix(k)
    rot = hadamard_rotation(q.shape[1], seed)
    return q @ rot, k @ rot
