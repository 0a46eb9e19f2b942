"""Command line: ``run``, ``ablate`` and ``gen``.

Exit codes: 0 ok, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, QuantizationError, TensorFileError
from .harness import AXES, FORMATS, RunConfig, ablate, generate, render, run
from .synth import GenSpec

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qattn", description="Quantized attention accuracy harness.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", help="write the report here instead of stdout")
        sp.add_argument("--format", choices=FORMATS, help="report format (default from config, else json)")
        sp.add_argument("--trials", type=int, help="override the trial count")
        sp.add_argument("--seed", type=int, help="override the first seed")

    r = sub.add_parser("run", help="evaluate the configured variants")
    r.add_argument("config")
    common(r)
    a = sub.add_parser("ablate", help="sweep one axis from the base variant")
    a.add_argument("--axis", required=True, help=f"one of {', '.join(AXES)}")
    a.add_argument("config")
    common(a)
    g = sub.add_parser("gen", help="write synthetic Q/K/V tensor files")
    g.add_argument("spec")
    g.add_argument("dir")
    g.add_argument("--seed", type=int, help="override the generator seed")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    kw = {}
    if args.trials is not None:
        kw["trials"] = args.trials
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.format is not None:
        kw["format"] = args.format
    if not kw:
        return cfg
    d = {**cfg.__dict__, **kw}
    return RunConfig(**d)


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_spec(path: str) -> GenSpec:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("spec must be a JSON object")
    try:
        return GenSpec.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def main(argv: list[str] | None = None) -> int:
    if os.environ.get("QATTN_VERBOSE"):
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        if args.command == "gen":
            spec = _load_spec(args.spec)
            if args.seed is not None:
                spec = spec.with_seed(args.seed)
            for p in generate(spec, args.dir):
                print(p)
            return EXIT_OK
        cfg = _apply_overrides(RunConfig.load(args.config), args)
        rows = ablate(cfg, args.axis) if args.command == "ablate" else run(cfg)
        _emit(render(rows, cfg.format), args.out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"qattn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TensorFileError, QuantizationError, OSError, ValueError) as exc:
        print(f"qattn: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
