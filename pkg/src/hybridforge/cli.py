"""Command line entry point.

One subcommand per pipeline stage plus `pipeline` to run everything. All
stages share --config/--seed/--out/--workers; stage-specific knobs map onto
the corresponding config section. Exit codes: 0 success, 2 configuration
error, 3 stage failure. HYBRIDFORGE_THREADS, when set, overrides --workers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, HybridForgeError
from .pipeline import STAGES, STRATEGIES, load_config, run_pipeline

_COMMANDS = STAGES + ("pipeline",)


def _read_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    return raw


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridforge",
        description="Convert a full-attention model into a task-tuned hybrid: "
                    "pretrain, distill linear blocks, search layer layouts, "
                    "fine-tune, benchmark, report.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="|".join(_COMMANDS))
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, metavar="N",
                       help="master seed: reseeds every stage and the task")
        p.add_argument("--out", metavar="DIR", help="output directory override")
        p.add_argument("--workers", type=int, metavar="N",
                       help="parallel distillation workers")
        if name in ("search", "pipeline"):
            p.add_argument("--p-min", type=float, dest="p_min", metavar="FLOAT",
                           help="absolute acceptance threshold")
            p.add_argument("--budget", type=int, metavar="K",
                           help="replace exactly K layers")
            p.add_argument("--strategy", choices=STRATEGIES,
                           help="layer selection strategy")
        if name in ("bench", "pipeline"):
            p.add_argument("--contexts", metavar="CSV",
                           help="comma-separated context lengths")
    return parser


def _apply_overrides(raw: dict, args: argparse.Namespace) -> dict:
    if args.out:
        raw["output_dir"] = args.out
    workers = args.workers
    env = os.environ.get("HYBRIDFORGE_THREADS")
    if env is not None:
        try:
            workers = int(env)
        except ValueError:
            raise ConfigError(f"HYBRIDFORGE_THREADS must be an integer, got {env!r}")
    if workers is not None:
        raw["workers"] = workers
    if args.seed is not None:
        s = args.seed
        raw["seeds"] = {"model": s, "pretrain": s + 1, "distill": s + 2,
                        "search": s + 3, "sft": s + 4, "bench": s + 5}
        raw.setdefault("task", {})
        if not isinstance(raw["task"], dict):
            raise ConfigError("config section 'task' must be an object")
        raw["task"]["seed"] = s
    if getattr(args, "p_min", None) is not None:
        raw.setdefault("search", {})["p_min"] = args.p_min
    if getattr(args, "budget", None) is not None:
        raw.setdefault("search", {})["budget"] = args.budget
    if getattr(args, "strategy", None) is not None:
        raw.setdefault("search", {})["strategy"] = args.strategy
    if getattr(args, "contexts", None) is not None:
        try:
            lengths = tuple(int(c) for c in args.contexts.split(",") if c.strip())
        except ValueError:
            raise ConfigError(f"--contexts must be comma-separated integers, "
                              f"got {args.contexts!r}")
        raw.setdefault("bench", {})["context_lengths"] = lengths
    return raw


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        raw = _read_config_file(args.config) if args.config else {}
        cfg = load_config(_apply_overrides(raw, args))
        stages = None if args.command == "pipeline" else [args.command]
        outcome = run_pipeline(cfg, stages=stages)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except HybridForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    paths = outcome["paths"]
    for stage, status in outcome["stages"].items():
        print(f"{stage}: {status}")
    print(f"artifacts in {paths.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
