"""Batch evaluation: named variants, trials over seeds, ablation axes, reports.

A run config is a JSON object with these keys (all optional except where noted):

``gen``        GenSpec fields for synthetic inputs (default spec if absent)
``tensors``    ``{"q": path, "k": path, "v": path}`` instead of ``gen``
``variants``   list of variant names or ``{"name", "base", <AttentionConfig fields>}``
``base``       variant used as the starting point for ``ablate`` (default ``sage2-4b``)
``trials``     number of seeds per variant (trial ``t`` uses ``seed + t``)
``seed``       first seed (defaults to the ``gen`` seed)
``workers``    process count (``QATTN_THREADS`` overrides)
``format``     ``json``, ``csv`` or ``md``
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import AttentionConfig, attention_oracle, attention_sage2
from .errors import ConfigError
from .metrics import AccuracyReport, aggregate, evaluate
from .synth import GenSpec, gen_qkv, load_tensor, save_tensor

log = logging.getLogger("qattn")

VARIANTS: dict[str, AttentionConfig] = {
    "fp-exact": AttentionConfig.full_precision(),
    "sage2-4b": AttentionConfig(),
    # The 8-bit kernel keeps every technique except smoothing Q.
    "sage2-8b": AttentionConfig(qk_format="int8", smooth_q=False),
    "hadamard-int4": AttentionConfig(smooth_q=False, smooth_k=False, baseline="hadamard"),
    "smoothquant-int4": AttentionConfig(smooth_q=False, smooth_k=False, baseline="smoothquant"),
    "per-tensor-int4": AttentionConfig(qk_granularity="per-tensor", smooth_q=False, smooth_k=False),
    "per-token-int4": AttentionConfig(qk_granularity="per-token"),
    "per-block-int4": AttentionConfig(qk_granularity="per-block"),
    "naive-int4": AttentionConfig(smooth_q=False, smooth_k=False),
}

FORMATS = ("json", "csv", "md")

_CONFIG_KEYS = {f.name for f in fields(AttentionConfig)}
_RUN_KEYS = {"gen", "tensors", "variants", "base", "trials", "seed", "workers", "format"}


@dataclass(frozen=True)
class Variant:
    name: str
    config: AttentionConfig


def resolve_variant(entry) -> Variant:
    """A registry name, or an object with ``name``, optional ``base`` and overrides."""
    if isinstance(entry, str):
        if entry not in VARIANTS:
            raise ConfigError(f"unknown variant {entry!r}; known: {sorted(VARIANTS)}")
        return Variant(entry, VARIANTS[entry])
    if not isinstance(entry, dict) or "name" not in entry:
        raise ConfigError("a variant is a name or an object with a 'name' key")
    entry = dict(entry)
    name = entry.pop("name")
    base = entry.pop("base", name if name in VARIANTS else "sage2-4b")
    if base not in VARIANTS:
        raise ConfigError(f"unknown base variant {base!r}")
    unknown = set(entry) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown attention config keys: {sorted(unknown)}")
    try:
        return Variant(str(name), VARIANTS[base].replace(**entry))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class RunConfig:
    gen: GenSpec = field(default_factory=GenSpec)
    tensors: dict[str, str] | None = None
    variants: list[Variant] = field(default_factory=lambda: [resolve_variant("sage2-4b")])
    base: Variant = field(default_factory=lambda: resolve_variant("sage2-4b"))
    trials: int = 1
    seed: int = 0
    workers: int = 1
    format: str = "json"

    def __post_init__(self):
        if not self.variants:
            raise ConfigError("at least one variant is required")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.format not in FORMATS:
            raise ConfigError(f"format must be one of {FORMATS}, got {self.format!r}")

    @classmethod
    def from_dict(cls, d: dict, root: Path | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - _RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        kw: dict = {}
        if "gen" in d:
            kw["gen"] = GenSpec.from_dict(d["gen"])
        if "tensors" in d:
            t = d["tensors"]
            if not isinstance(t, dict) or set(t) != {"q", "k", "v"}:
                raise ConfigError("'tensors' needs exactly the keys q, k, v")
            root = root or Path(".")
            kw["tensors"] = {key: str(root / p) for key, p in t.items()}
        if "variants" in d:
            if not isinstance(d["variants"], list):
                raise ConfigError("'variants' must be a list")
            kw["variants"] = [resolve_variant(v) for v in d["variants"]]
        if "base" in d:
            kw["base"] = resolve_variant(d["base"])
        for key in ("trials", "seed", "workers"):
            if key in d:
                if not isinstance(d[key], int) or isinstance(d[key], bool):
                    raise ConfigError(f"'{key}' must be an integer")
                kw[key] = d[key]
        if "format" in d:
            kw["format"] = d["format"]
        if "seed" not in kw and "gen" in kw:
            kw["seed"] = kw["gen"].seed
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(data, path.parent)


def worker_count(cfg: RunConfig) -> int:
    env = os.environ.get("QATTN_THREADS")
    if env is None:
        return cfg.workers
    try:
        n = int(env)
    except ValueError:
        raise ConfigError(f"QATTN_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise ConfigError("QATTN_THREADS must be >= 1")
    return n


def _inputs(cfg: RunConfig, trial: int):
    if cfg.tensors is not None:
        return tuple(load_tensor(cfg.tensors[key]) for key in ("q", "k", "v"))
    return gen_qkv(cfg.gen.with_seed(cfg.seed + trial))


def _run_trial(args) -> list[AccuracyReport]:
    cfg, trial = args
    q, k, v = _inputs(cfg, trial)
    refs: dict = {}
    out = []
    for var in cfg.variants:
        c = var.config
        key = (c.causal, c.scale)
        if key not in refs:
            refs[key] = attention_oracle(q, k, v, causal=c.causal, scale=c.scale)
        o, _, _ = attention_sage2(q, k, v, c)
        out.append(evaluate(refs[key], o, c.to_dict()))
    log.info("trial %d done", trial)
    return out


def run_trials(cfg: RunConfig) -> list[list[AccuracyReport]]:
    """Reports indexed ``[variant][trial]``, independent of worker scheduling."""
    jobs = [(cfg, t) for t in range(cfg.trials)]
    n = min(worker_count(cfg), cfg.trials)
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            per_trial = list(pool.map(_run_trial, jobs))
    else:
        per_trial = [_run_trial(j) for j in jobs]
    return [[per_trial[t][i] for t in range(cfg.trials)] for i in range(len(cfg.variants))]


@dataclass
class ReportRow:
    variant: str
    config: dict
    mean: AccuracyReport
    worst: AccuracyReport
    per_trial: list[AccuracyReport] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        pick = lambda r: {"cos_sim": r.cos_sim, "rel_l1": r.rel_l1, "rmse": r.rmse}  # noqa: E731
        return {
            "variant": self.variant,
            "config": self.config,
            "trials": self.mean.trials,
            "mean": pick(self.mean),
            "worst": pick(self.worst),
        }


def run(cfg: RunConfig) -> list[ReportRow]:
    rows = []
    for var, reports in zip(cfg.variants, run_trials(cfg)):
        rows.append(ReportRow(var.name, var.config.to_dict(), aggregate(reports, "mean"),
                              aggregate(reports, "worst"), reports))
    return rows


AXES = ("granularity", "pv_format", "smoothing", "accumulation")


def axis_variants(axis: str, base: AttentionConfig) -> list[Variant]:
    """Rows of an ablation table, each ``base`` with one axis overridden.

    The P~V data-type rows switch to exact accumulation since INT8 and FP16
    have no FP22 accumulator path.
    """
    if axis == "granularity":
        rows = [(g, {"qk_granularity": g}) for g in ("per-token", "per-thread", "per-block", "per-tensor")]
    elif axis == "smoothing":
        off = {"smooth_q": False, "smooth_k": False}
        rows = [
            ("None", {**off, "baseline": "none"}),
            ("HadmdAttn", {**off, "baseline": "hadamard"}),
            ("SmoothAttn", {**off, "baseline": "smoothquant"}),
            ("Smooth K", {"smooth_q": False, "smooth_k": True, "baseline": "none"}),
            ("Smooth Q", {"smooth_q": True, "smooth_k": False, "baseline": "none"}),
            ("Smooth Q+K", {"smooth_q": True, "smooth_k": True, "baseline": "none"}),
        ]
    elif axis == "pv_format":
        rows = [(label, {"pv_format": f, "accumulation": "fp32-exact"})
                for label, f in (("INT8", "int8"), ("E5M2", "e5m2"), ("E4M3", "e4m3"), ("FP16", "fp16"))]
    elif axis == "accumulation":
        rows = [(a, {"accumulation": a}) for a in ("fp32-exact", "fp22-single-level", "fp22-two-level")]
    else:
        raise ConfigError(f"unknown axis {axis!r}; expected one of {AXES}")
    try:
        return [Variant(label, base.replace(**kw)) for label, kw in rows]
    except ConfigError as exc:
        raise ConfigError(f"base config incompatible with axis {axis!r}: {exc}") from exc


def ablate(cfg: RunConfig, axis: str) -> list[ReportRow]:
    variants = axis_variants(axis, cfg.base.config)
    return run(RunConfig(cfg.gen, cfg.tensors, variants, cfg.base, cfg.trials, cfg.seed, cfg.workers, cfg.format))


_COLUMNS = [("cos_sim", "CosSim"), ("rel_l1", "Relative L1"), ("rmse", "RMSE")]


def render(rows: list[ReportRow], fmt: str = "json") -> str:
    """Serialize rows; the same rows always give the same bytes."""
    if fmt == "json":
        return json.dumps({"rows": [r.to_dict() for r in rows]}, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["variant", "trials"] + [f"{k}_{a}" for k, _ in _COLUMNS for a in ("mean", "worst")])
        for r in rows:
            vals = [getattr(rep, k) for k, _ in _COLUMNS for rep in (r.mean, r.worst)]
            w.writerow([r.variant, r.mean.trials] + [repr(float(x)) for x in vals])
        return buf.getvalue()
    if fmt == "md":
        head = ["Variant", "CosSim ↑", "CosSim worst", "Relative L1 ↓", "Rel L1 worst", "RMSE ↓", "RMSE worst"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for r in rows:
            cells = [
                r.variant,
                f"{100 * r.mean.cos_sim:.3f}%", f"{100 * r.worst.cos_sim:.3f}%",
                f"{r.mean.rel_l1:.4f}", f"{r.worst.rel_l1:.4f}",
                f"{r.mean.rmse:.4g}", f"{r.worst.rmse:.4g}",
            ]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown output format {fmt!r}")


def generate(spec: GenSpec, out_dir) -> list[Path]:
    """Write ``q.qatn``, ``k.qatn`` and ``v.qatn`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, t in zip("qkv", gen_qkv(spec)):
        p = out_dir / f"{name}.qatn"
        save_tensor(p, np.ascontiguousarray(t))
        paths.append(p)
    return paths
