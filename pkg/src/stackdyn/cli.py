"""``stackdyn`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.  Errors
are reported on stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, ContractError, StackdynError
from .harness import field_from_config, load_config, read_json, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _fail(code: int, exc: Exception) -> int:
    err = {"error": type(exc).__name__, "message": str(exc)}
    if getattr(exc, "field", ""):
        err["field"] = exc.field
    if getattr(exc, "gate", ""):
        err["gate"] = exc.gate
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stackdyn", description="Stackelberg and simultaneous learning dynamics experiments")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="execute the task named in a config")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (default: config output_dir or .)")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    f = sub.add_parser("field", help="emit a vector-field grid CSV for a two-dimensional game")
    f.add_argument("config")
    f.add_argument("--out", default=None)
    s = sub.add_parser("sweep", help="run a parameter grid and write a summary CSV")
    s.add_argument("config")
    s.add_argument("--out", default=None)
    s.add_argument("--seed", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "field":
            path = field_from_config(read_json(args.config), args.out)
            written = {"vector_field": str(path)}
        else:
            cfg = load_config(args.config)
            if args.command == "sweep":
                cfg["task"] = "sweep"
            written = run_experiment(cfg, args.out, args.seed)["paths"]
    except (ConfigError, ContractError) as exc:
        return _fail(EXIT_CONFIG, exc)
    except StackdynError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (ArithmeticError, ValueError) as exc:
        return _fail(EXIT_NUMERICAL, exc)
    print(json.dumps(written, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
