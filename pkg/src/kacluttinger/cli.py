"""Command line entry point ``kl-lab``."""
from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .experiments import EXIT_USAGE, EXPERIMENTS, run_experiment

KIND_OF = {"gap-sweep": "gap-sweep", "quantile": "quantile", "deconc": "deconcentration",
           "dos": "dos", "bec": "bec"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kl-lab",
        description="Numerical laboratory for Dirichlet spectra among Poissonian hard obstacles.",
        epilog="Settings come from the config file, then KL_<KEY> environment variables, "
               "then --set and the explicit flags (later wins).")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value file")
        p.add_argument("--seed", type=str, help="master seed (unsigned 64-bit)")
        p.add_argument("--jobs", type=str, help="parallel worker count")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return EXIT_USAGE
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in ("seed", "jobs", "out"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.command in KIND_OF:
        overrides.setdefault("kind", KIND_OF[args.command])
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    code, manifest = run_experiment(args.command, cfg)
    for err in manifest["errors"]:
        print(f"{err['type']}: {err['message']}", file=sys.stderr)
    print(json.dumps({"out": str(cfg.out), "exit_code": code, "wall_time": manifest["wall_time"]}))
    return code


if __name__ == "__main__":
    sys.exit(main())
