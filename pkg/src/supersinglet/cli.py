"""Command line interface: run experiments, replay archived rows, summarize."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .runner import (
    ExperimentConfig,
    PRESETS,
    RunArchive,
    preset_config,
    replay,
    run_experiment,
    summarize,
    summary_text,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="supersinglet",
        description="Prepare total-spin-zero states by collective projections "
                    "and conditional rotations; run, replay, and summarize "
                    "seeded experiment batches.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a batch of trajectories")
    src = run.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS),
                     help="named experiment configuration")
    src.add_argument("--config", type=Path,
                     help="flat JSON config file (unknown keys rejected)")
    run.add_argument("--trajectories", type=int, help="override trajectory count")
    run.add_argument("--seed", type=int, help="override master seed (64-bit)")
    run.add_argument("--out", type=Path, required=True, help="archive directory")
    run.add_argument("--backend", choices=["ideal", "qnd"],
                     help="measurement backend override")
    run.add_argument("--mcut", type=float,
                     help="override exit threshold |m| <= m_cut (half-integer)")
    run.add_argument("--unraveling", action="store_true",
                     help="force pure-state unraveling of the mixed start")
    run.add_argument("--workers", type=int, help="parallel worker override")

    rep = sub.add_parser("replay", help="re-run one archived trajectory")
    rep.add_argument("--archive", type=Path, required=True,
                     help="archive directory or rows.jsonl path")
    rep.add_argument("--row", type=int, required=True, help="trajectory index")

    summ = sub.add_parser("summarize", help="print archive statistics")
    summ.add_argument("--archive", type=Path, required=True,
                      help="archive directory or rows.jsonl path")
    summ.add_argument("--json", action="store_true", dest="as_json",
                      help="emit JSON instead of text")
    return parser


def _load_config(args) -> ExperimentConfig:
    if args.preset:
        config = preset_config(args.preset)
    else:
        with open(args.config) as fh:
            config = ExperimentConfig.from_dict(json.load(fh))
    overrides = {}
    if args.trajectories is not None:
        overrides["trajectories"] = args.trajectories
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.backend is not None:
        overrides["backend"] = args.backend
    if args.mcut is not None:
        overrides["m_cut"] = args.mcut
    if args.unraveling:
        overrides["mode"] = "unraveling"
    if args.workers is not None:
        overrides["workers"] = args.workers
    return replace(config, **overrides) if overrides else config


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        config = _load_config(args)
        archive = run_experiment(config, out_dir=args.out)
        print(f"archive written to {args.out}")
        print(summary_text(archive.summary), end="")
        return 0
    if args.command == "replay":
        archive = RunArchive.read(args.archive)
        result, row, identical = replay(archive, args.row)
        print(f"trajectory {args.row}: seed {row['seed']}, "
              f"{len(row['events'])} events, "
              f"converged={row['converged']} at round {row['converged_round']}")
        if identical:
            print("replay is bit-identical to the archived row")
            return 0
        print("replay DIVERGED from the archived row", file=sys.stderr)
        return 1
    if args.command == "summarize":
        archive = RunArchive.read(args.archive)
        summary = summarize(archive)
        if args.as_json:
            print(json.dumps(summary, indent=2))
        else:
            print(summary_text(summary), end="")
        return 0
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
