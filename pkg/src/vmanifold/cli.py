"""Command-line entry point: ``vmanifold <command> --config FILE [--output DIR] [--seed N] [--mode M]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config, shipped_config
from .pipeline import COMMANDS, DependencyError, run_pipeline
from .training import MODES, ConfigError as TrainConfigError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vmanifold", description="Multislice variational manifold reconstruction")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", default=None,
                    help="YAML experiment config (default: the shipped default config)")
    ap.add_argument("--output", default=None, help="run directory (overrides config 'output')")
    ap.add_argument("--seed", type=int, default=None, help="global seed (overrides config)")
    ap.add_argument("--mode", choices=MODES, default=None, help="training mode (overrides config)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(args.config or shipped_config("default"))
        cfg = cfg.with_overrides(seed=args.seed, mode=args.mode, output=args.output)
        out = cfg.output or "run"
        path = run_pipeline(args.command, cfg, Path(out))
    except FileNotFoundError as exc:
        print(f"config error: file not found: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, TrainConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{args.command}: wrote {path}")
    return EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
