"""``lab`` command line: validate, run and list scenarios."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import list_scenarios, validate


def _cmd_validate(args) -> int:
    rep = validate(args.config)
    print(json.dumps(rep, indent=2))
    return 0 if rep["valid"] else 2


def _cmd_run(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be at least 1", file=sys.stderr)
            return 2
        os.environ["LAB_THREADS"] = str(args.threads)
    from .experiments import run

    code, manifest = run(args.config, seed=args.seed, out=args.out, threads=args.threads)
    if manifest.get("verdict") == "invalid":
        for err in manifest["errors"]:
            print(f"invalid config: {err}", file=sys.stderr)
    else:
        print(json.dumps({k: manifest.get(k) for k in ("name", "experiment", "verdict", "verdicts", "artifacts")},
                         indent=2))
    return code


def _cmd_list(args) -> int:
    for s in list_scenarios():
        print(f"{s['name']:<28} {s['experiment']:<20} {s['description']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("validate", help="static checks of a config file or built-in scenario")
    v.add_argument("config")
    v.set_defaults(fn=_cmd_validate)
    r = sub.add_parser("run", help="run an experiment end to end")
    r.add_argument("config")
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--out", default=None)
    r.add_argument("--threads", type=int, default=None, help="worker threads (default: LAB_THREADS or 1)")
    r.set_defaults(fn=_cmd_run)
    ls = sub.add_parser("list-scenarios", help="show the shipped scenarios")
    ls.set_defaults(fn=_cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
