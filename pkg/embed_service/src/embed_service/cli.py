"""Command-line launcher.

Flags override the EMBED_SERVICE_* environment variables, which override
the defaults. Exit code 2 for bad arguments.
"""

from __future__ import annotations

import argparse
import os
import sys

import uvicorn

from .app import DEFAULT_BATCH_MAX, create_app
from .stub import DEFAULT_DIM


def build_parser() -> argparse.ArgumentParser:
    env = os.environ
    parser = argparse.ArgumentParser(
        prog="embed-service",
        description="Serve text/image embeddings and NSFW scores over HTTP.",
    )
    parser.add_argument("--host", default=env.get("EMBED_SERVICE_HOST", "127.0.0.1"))
    parser.add_argument("--port", type=int, default=int(env.get("EMBED_SERVICE_PORT", "8100")))
    parser.add_argument(
        "--mode",
        choices=("stub", "model"),
        default=env.get("EMBED_SERVICE_MODE", "stub"),
        help="stub serves deterministic content-seeded outputs (default)",
    )
    parser.add_argument("--dim", type=int, default=int(env.get("EMBED_SERVICE_DIM", str(DEFAULT_DIM))))
    parser.add_argument(
        "--batch-max", type=int, default=int(env.get("EMBED_SERVICE_BATCH_MAX", str(DEFAULT_BATCH_MAX)))
    )
    parser.add_argument("--log-level", default=env.get("EMBED_SERVICE_LOG", "info"))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        app = create_app(mode=args.mode, dim=args.dim, batch_max=args.batch_max)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level)
    return 0


if __name__ == "__main__":
    sys.exit(main())
