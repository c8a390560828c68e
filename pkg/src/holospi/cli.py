"""Command-line surface.

Exit codes: 0 success, 1 usage/configuration error, 2 data or contract
error. Progress goes to standard error; machine-readable output only to
files. HSPI_LOG in {quiet, info, debug} sets verbosity.
"""

import argparse
import logging
import os
import sys

from .config import RunConfig, load_config
from .driver import (run_make_object, run_metrics, run_reconstruct,
                     run_reconstruct_lattice, run_simulate_lattice,
                     run_simulate_single)
from .errors import ConfigError, ContractError, FormatError

log = logging.getLogger("holospi")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _setup_logging():
    level = {"quiet": logging.WARNING, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("HSPI_LOG", "info"),
                                         logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)


def _build_parser() -> _Parser:
    parser = _Parser(prog="holospi", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="run configuration file (key = value lines)")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--workers", type=int, help="override the worker count")

    for name in ("make-object", "simulate-single", "simulate-lattice"):
        common(sub.add_parser(name))
    for name in ("reconstruct", "reconstruct-lattice"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("--data", help="input dataset (default: in the output dir)")
    p = sub.add_parser("metrics")
    common(p)
    p.add_argument("--model", required=True, help="reconstruction snapshot (.bin)")
    p.add_argument("--truth", required=True, help="ground-truth model (.bin)")
    p.add_argument("--diagnostics", help="diagnostics.csv for the convergence series")
    return parser


def _config_for(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().finalize()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    cfg._check()
    return cfg


def cli_main(argv) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _config_for(args)
        if args.command == "make-object":
            run_make_object(cfg, args.out)
        elif args.command == "simulate-single":
            run_simulate_single(cfg, args.out)
        elif args.command == "simulate-lattice":
            run_simulate_lattice(cfg, args.out)
        elif args.command == "reconstruct":
            run_reconstruct(cfg, args.out, args.data)
        elif args.command == "reconstruct-lattice":
            run_reconstruct_lattice(cfg, args.out, args.data)
        elif args.command == "metrics":
            run_metrics(cfg, args.out, args.model, args.truth, args.diagnostics)
        return 0
    except _UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        parser.print_usage(sys.stderr)
        return 1
    except ConfigError as exc:
        sys.stderr.write(f"configuration error: {exc}\n")
        return 1
    except (ContractError, FormatError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
