"""Command-line entry point.

One invocation runs one stage (or the whole pipeline with --stage all).
Pipeline stages share a working directory given by --output; segment
additionally needs --input (the raw document manifest). rouge and stats are
standalone: rouge reads candidate/reference rows from --input and writes a
score report to --output, stats merges the funnel reports under a working
directory and prints them.

Exit codes: 0 success, 2 bad arguments or config, 1 stage failure. The
MMFORGE_LOG environment variable sets the log level (DEBUG, INFO, ...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from pydantic import ValidationError

from .model import PipelineConfig
from .pairs import AltFilterTables
from .stages import (
    PIPELINE_ORDER,
    StageContext,
    run_assign,
    run_dedup,
    run_fetch,
    run_pairs,
    run_pipeline,
    run_rouge,
    run_score,
    run_segment,
    run_stats,
)

logger = logging.getLogger(__name__)

STAGES = ("all", "segment", "fetch", "dedup", "score", "assign", "pairs", "rouge", "stats")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmforge",
        description="Build interleaved image-text documents and image-alt-text pairs from web-crawl manifests.",
    )
    parser.add_argument("--stage", choices=STAGES, default="all", help="stage to run (default: all)")
    parser.add_argument("--config", type=Path, help="pipeline config JSON (defaults used when omitted)")
    parser.add_argument("--input", type=Path, help="input manifest (raw documents, or rouge rows)")
    parser.add_argument("--output", type=Path, help="working directory, or report path for rouge")
    parser.add_argument("--seed", type=int, help="override the config rng_seed")
    parser.add_argument("--embed-endpoint", help="embedding service URL; in-process stub when omitted")
    parser.add_argument("--filter-tables", type=Path, help="alt-text filter tables JSON (defaults when omitted)")
    return parser


def _load_config(path: Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_file(path)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("MMFORGE_LOG", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)

    needs_input = args.stage in ("all", "segment", "rouge")
    if needs_input and args.input is None:
        parser.error(f"--input is required for stage {args.stage}")
    if args.output is None:
        parser.error("--output is required")
    if args.input is not None and not args.input.exists():
        print(f"error: input {args.input} does not exist", file=sys.stderr)
        return 2

    try:
        cfg = _load_config(args.config)
        tables = AltFilterTables.from_file(args.filter_tables) if args.filter_tables else None
    except (ValidationError, json.JSONDecodeError, OSError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None and not 0 <= args.seed < 1 << 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 2

    if args.stage == "rouge":
        try:
            scored = run_rouge(args.input, args.output)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: rouge failed: {exc}", file=sys.stderr)
            return 1
        print(f"rouge: scored {scored} rows -> {args.output}")
        return 0

    ctx = StageContext(
        workdir=args.output,
        cfg=cfg,
        seed=args.seed,
        embed_endpoint=args.embed_endpoint,
        tables=tables,
    )

    if args.stage == "stats":
        merged = run_stats(ctx)
        print(json.dumps(merged, ensure_ascii=False, indent=2, sort_keys=True))
        return 0 if merged["ok"] else 1

    ctx.workdir.mkdir(parents=True, exist_ok=True)
    try:
        if args.stage == "all":
            executed = run_pipeline(ctx, args.input)
            skipped = [s for s in PIPELINE_ORDER if s not in executed]
            print(f"pipeline done: ran {executed or 'nothing'}, up to date: {skipped or 'none'}")
        elif args.stage == "segment":
            report = run_segment(ctx, args.input)
            print(f"segment: {report.input_count} docs in, {report.output_count} out")
        else:
            runner = {
                "fetch": run_fetch,
                "dedup": run_dedup,
                "score": run_score,
                "assign": run_assign,
                "pairs": run_pairs,
            }[args.stage]
            report = runner(ctx)
            print(f"{report.stage}: {report.input_count} in, {report.output_count} out")
    except FileNotFoundError as exc:
        print(f"error: {exc} (run earlier stages first)", file=sys.stderr)
        return 1
    except Exception as exc:
        logger.exception("stage %s failed", args.stage)
        print(f"error: stage {args.stage} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
