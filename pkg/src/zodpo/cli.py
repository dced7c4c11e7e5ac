"""Command-line entry point: ``zodpo run|sweep|selftest|pick``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import ConfigError, ValidationError
from .harness import pick_output, read_trace, run, sweep
from .selftest import selftest


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", help="experiment config (JSON)")
    p.add_argument("--out", help="output directory (overrides config.output_dir)")
    p.add_argument("--jobs", type=int, default=None, help="parallel trials (default: CPU count)")
    oracle = p.add_mutually_exclusive_group()
    oracle.add_argument("--oracle", dest="oracle", action="store_true", default=None, help="record model-based diagnostics")
    oracle.add_argument("--no-oracle", dest="oracle", action="store_false", help="model-free traces only")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="zodpo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("run", help="run all trials of one config"))
    _add_common(sub.add_parser("sweep", help="run every point of the config's sweep grid"))
    sub.add_parser("selftest", help="oracle and sampling self-checks")
    pick = sub.add_parser("pick", help="select the output policy from a trace file")
    pick.add_argument("trace")
    pick.add_argument("--rule", choices=("last", "uniform"), default="last")
    pick.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            results = selftest()
            for r in results:
                print(r.line())
            return 0 if all(r.passed for r in results) else 1
        if args.command == "pick":
            table = read_trace(args.trace)
            s, params = pick_output(table.params, args.rule, args.seed)
            print(json.dumps({"iteration": s, "params": [float(v) for v in params]}))
            return 0
        cfg = load_config(args.config)
        if args.command == "run":
            res = run(cfg, args.out, jobs=args.jobs, oracle=args.oracle)
            print(f"{len(res.trace_files)} trace(s) and summary written to {res.out_dir}")
        else:
            results = sweep(cfg, args.out, jobs=args.jobs, oracle=args.oracle)
            print(f"{len(results)} sweep point(s) written")
        return 0
    except (ConfigError, ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
