"""Command-line experiment driver.

Usage: ``mrlod <experiment> [--config FILE] [--key value ...] --out DIR``.
Exit codes: 0 all rows ok, 1 configuration error, 2 some rows failed
(failures are recorded in the CSV sidecar and the run continues).
"""

import argparse
import sys

from .config import ConfigError, ExperimentConfig, EXPERIMENTS
from .experiments import run_experiment

__all__ = ["main", "build_config"]


def build_config(argv) -> tuple:
    parser = argparse.ArgumentParser(
        prog="mrlod",
        description="Multi-resolution decomposition experiments for "
                    "Helmholtz/Poisson model problems")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--out", required=True, help="output directory")
    args, overrides = parser.parse_known_args(argv)

    cfg = ExperimentConfig.defaults_for(args.experiment)
    if args.config:
        cfg.apply_file(args.config)
        cfg.experiment = args.experiment
    if len(overrides) % 2 != 0:
        raise ConfigError(f"dangling override in {overrides!r}; "
                          "expected --key value pairs")
    for flag, value in zip(overrides[::2], overrides[1::2]):
        if not flag.startswith("--"):
            raise ConfigError(f"expected --key, got {flag!r}")
        cfg.set_key(flag[2:], value)
    cfg.validate()
    return cfg, args.out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg, out_dir = build_config(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    path, errors = run_experiment(cfg, out_dir)
    print(f"wrote {path}")
    if errors:
        for group, msg in errors:
            print(f"row group failed: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
