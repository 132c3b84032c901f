"""Command-line entry point: one subcommand per stage plus ``run`` and ``validate``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import STAGES, ConfigError, LockError, RunConfig, StageError, run, validate

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

STAGE_COMMANDS = {
    "gen-vessel": "vessel",
    "gen-flow": "flow",
    "trace": "particles",
    "gen-tissue": "tissue",
    "sim-rf": "rf",
    "beamform": "beamform",
    "post": "post",
    "metrics": "metrics",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--memory-budget-bytes", type=int, help="override the memory budget")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="updsim", description="3D power Doppler simulation pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stage in STAGE_COMMANDS.items():
        p = sub.add_parser(name, help=f"run the {stage} stage")
        _common(p)
        p.add_argument("--force", action="store_true", help="ignore the stage cache")
    p = sub.add_parser("run", help="run the pipeline")
    _common(p)
    p.add_argument("--stages", help=f"comma-separated subset of {','.join(STAGES)}")
    p.add_argument("--force", action="store_true", help="ignore the stage cache")
    p = sub.add_parser("validate", help="check a configuration without running it")
    _common(p)
    return parser


def _load(args) -> RunConfig:
    try:
        with open(args.config) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    if args.seed is not None:
        d["seed"] = args.seed
    if args.out is not None:
        d["out"] = args.out
    if args.memory_budget_bytes is not None:
        d["memory_budget_bytes"] = args.memory_budget_bytes
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load(args)
        if args.command == "validate":
            report = validate(cfg)
            for line in report.lines():
                print(line)
            print("ok" if report.ok else f"{len(report.errors)} error(s)")
            return EXIT_OK if report.ok else EXIT_CONFIG
        stages = STAGE_COMMANDS.get(args.command) or args.stages
        result = run(cfg, stages, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, LockError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    for stage in result.ran:
        print(f"{stage}: ran in {result.manifests[stage].seconds:.1f} s")
    for stage in result.skipped:
        print(f"{stage}: cached")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
