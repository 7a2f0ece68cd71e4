"""Command line entry point: ``transmia run|run-appendix|validate CONFIG``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

import yaml

from .errors import ConfigError
from .experiment import (load_config, run_appendix_experiment, run_experiment,
                         write_appendix_report, write_report)

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transmia",
                                description="Membership-inference experiments with "
                                            "transfer shadow training.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("run", "run the shadow-size sweep"),
                       ("run-appendix", "attack the source through transferred target models"),
                       ("validate", "check a config and print it with defaults filled in")):
        cmd = sub.add_parser(name, help=text)
        cmd.add_argument("config", help="YAML experiment config")
        cmd.add_argument("--seed", type=int, help="override the master seed")
        cmd.add_argument("--workers", type=int, help="parallel worker processes")
        cmd.add_argument("--out", help="output directory (overrides output_dir)")
    return p


def _load(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError(["--workers: must be positive"])
        changes["workers"] = args.workers
    if args.out is not None:
        changes["output_dir"] = args.out
    return dataclasses.replace(cfg, **changes)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        yaml.safe_dump(cfg.to_dict(), sys.stdout, sort_keys=False)
        return EXIT_OK
    if args.command == "run":
        report = run_experiment(cfg)
        path = write_report(report, cfg.output_dir)
    else:
        if cfg.appendix is None:
            print("config error: appendix: section required for run-appendix", file=sys.stderr)
            return EXIT_CONFIG
        report = run_appendix_experiment(cfg)
        path = write_appendix_report(report, cfg.output_dir)
    print(path)
    if report.partial:
        for cell, errs in report.failed.items():
            print(f"failed cell {cell[0].value}/{cell[1].value}/{cell[2]}: {errs[0]}",
                  file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
