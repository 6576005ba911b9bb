"""Command-line entry point ``spatial-sir``.

Exit codes: 0 on success, 2 on a configuration error (including an occupied
output directory without ``--force``), 3 on a numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..fields import NumericalError
from .config import ConfigError, ExperimentConfig, load_config
from .manifest import MANIFEST_NAME
from . import runs

__all__ = ["main", "build_parser", "config_from_path"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

_COMMANDS = {
    "simulate": lambda cfg, a: runs.run_simulate(cfg, a.out, a.workers, a.force),
    "solve-nonlocal": lambda cfg, a: runs.run_solve(cfg, a.out, "nonlocal", a.force),
    "solve-local": lambda cfg, a: runs.run_solve(cfg, a.out, "local", a.force),
    "converge-meanfield": lambda cfg, a: runs.run_converge_meanfield(cfg, a.out, a.workers, a.force),
    "converge-local": lambda cfg, a: runs.run_converge_local(cfg, a.out, a.workers, a.force),
    "diagnostics": lambda cfg, a: runs.run_diagnostics(cfg, a.out, a.workers, a.force),
}


def config_from_path(path) -> ExperimentConfig:
    """Load an INI config, or the resolved config stored in a run manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if path.suffix == ".json":
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read manifest ({exc})") from exc
        if d.get("format") != "spatial-sir-manifest v1":
            raise ConfigError(f"{path}: not a spatial-sir manifest")
        return ExperimentConfig.from_dict(d["config"])
    return load_config(path)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatial-sir", description="Spatial SIR particle systems and their limits.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI config or manifest.json of an earlier run")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_u64, default=None, help="override the master seed")
        p.add_argument("--workers", type=_positive, default=1)
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_path(args.config)
        if args.seed is not None:
            cfg = cfg.with_(seed=args.seed)
        out = _COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"spatial-sir: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"spatial-sir: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
