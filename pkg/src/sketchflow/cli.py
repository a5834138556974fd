"""Command-line entry point: ``sketchflow <command> [flags]``.

Progress is printed as one JSON object per line on stdout.  Exit codes:
0 success, 2 config error, 3 missing artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .training import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = (
    "gen-corpus", "train-decoder", "invert", "train-encoder", "train-cnf",
    "generate", "interpolate", "evaluate", "gradcheck", "pipeline",
)


def _emit(rec: dict) -> None:
    print(json.dumps(rec, default=float), flush=True)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sketchflow", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML/JSON config document")
    p.add_argument("--profile", default="desk", help="built-in profile: desk or paper")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", help="run directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--resume", action="store_true", help="resume training stages from their checkpoints")
    p.add_argument("--flow", default=None, help="flow model name for generate/interpolate/evaluate (default: flow)")
    p.add_argument("--sketch", action="append", default=None, help="sketch id (repeatable; default: test split)")
    p.add_argument("--seeds", type=int, default=20, help="gradcheck: random instances per check")
    return p


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "gradcheck":
        from .gradsuite import run_suite

        results = run_suite(n_seeds=args.seeds, emit=_emit)
        failed = [r for r in results if not r.passed]
        _emit({"event": "gradcheck", "checks": len(results), "failed": [r.name for r in failed]})
        return EXIT_OK if not failed else 1

    try:
        cfg = load_config(args.profile, args.config, args.override, args.seed, args.out)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.key, "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": "config", "key": "<document>", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG

    from . import pipeline as pl

    r = pl.Run(cfg, _emit)
    flow = args.flow or "flow"
    actions = {
        "gen-corpus": lambda: pl.gen_corpus(r),
        "train-decoder": lambda: pl.train_decoder_stage(r, args.resume),
        "invert": lambda: pl.invert_stage(r),
        "train-encoder": lambda: pl.train_encoder_stage(r, args.resume),
        "train-cnf": lambda: pl.train_cnf_stage(r, args.resume),
        "generate": lambda: pl.generate_stage(r, args.sketch, flow),
        "interpolate": lambda: pl.interpolate_stage(r, args.sketch, flow),
        "evaluate": lambda: _emit({"event": "metrics", **pl.evaluate_stage(r, flow, args.sketch).to_dict()["means"]}),
        "pipeline": lambda: _emit({"event": "metrics", **pl.pipeline(r).to_dict()["means"]}),
    }
    try:
        actions[args.command]()
    except pl.MissingArtifactError as exc:
        print(json.dumps({"error": "missing-artifact", "path": str(exc.path), "message": str(exc)}), file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, FloatingPointError) as exc:
        print(json.dumps({"error": "numerical", "message": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC
    _emit({"event": "exit", "command": args.command, "status": EXIT_OK})
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
