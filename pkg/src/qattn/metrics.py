"""Accuracy metrics of a quantized output against the exact reference."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


def _flat(o_ref, o) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(o_ref, dtype=np.float64)
    b = np.asarray(o, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.ravel(), b.ravel()


def cos_sim(o_ref, o) -> float:
    a, b = _flat(o_ref, o)
    # Normalize by the max first so tiny or huge inputs neither underflow nor overflow.
    ma, mb = np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0)
    a, b = (a / ma if ma else a), (b / mb if mb else b)
    na, nb = np.sqrt(np.sum(a * a)), np.sqrt(np.sum(b * b))
    if na == 0.0 and nb == 0.0:
        raise ValueError("undefined similarity: both inputs are zero")
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))


def rel_l1(o_ref, o) -> float:
    a, b = _flat(o_ref, o)
    denom = np.sum(np.abs(a))
    if denom == 0.0:
        raise ValueError("relative L1 undefined for a zero reference")
    return float(np.sum(np.abs(a - b)) / denom)


def rmse(o_ref, o) -> float:
    a, b = _flat(o_ref, o)
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass
class AccuracyReport:
    cos_sim: float
    rel_l1: float
    rmse: float
    config: dict = field(default_factory=dict)
    aggregation: str = "single"
    trials: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(o_ref, o, config: dict | None = None) -> AccuracyReport:
    return AccuracyReport(cos_sim(o_ref, o), rel_l1(o_ref, o), rmse(o_ref, o), dict(config or {}))


def aggregate(reports: list[AccuracyReport], mode: str = "mean") -> AccuracyReport:
    """Mean of each metric, or the worst value of each (min cos, max errors)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    cos = np.array([r.cos_sim for r in reports])
    l1 = np.array([r.rel_l1 for r in reports])
    err = np.array([r.rmse for r in reports])
    if mode == "mean":
        vals = cos.mean(), l1.mean(), err.mean()
    elif mode == "worst":
        vals = cos.min(), l1.max(), err.max()
    else:
        raise ValueError(f"unknown aggregation {mode!r}")
    return AccuracyReport(*(float(v) for v in vals), dict(reports[0].config), mode, len(reports))
