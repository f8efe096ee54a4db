"""Command-line entry point: one subcommand per pipeline stage.

Every stage shares the same grammar:

    r2v <stage> --config cfg.json [--seed N] [--set key=value ...]
        [--force] --out run_dir/

``transfer`` and ``fewshot`` additionally accept ``--source`` and
``--target`` run directories when heads and windows live in different runs
(both default to ``--out``). Exit code 0 on success, 2 on a validation
problem (bad config, missing upstream artifact, digest mismatch), 3 on a
remote-backend failure. Secrets are environment-only: R2V_API_KEY for remote
backends, R2V_CACHE_DIR to move the summary cache.
"""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .pipeline import STAGES, ValidationError, apply_overrides, load_config, run_stage
from .summarize import BackendError

_STAGE_HELP = {
    "synth": "generate the multi-site synthetic cohort, windows, and splits",
    "serialize": "render each window to text (canonical, or template arm style)",
    "summarize": "summarize serialized windows (mock or remote backend)",
    "embed": "embed summaries into fixed-length vectors",
    "grid": "build raw hourly grids and training-split statistics",
    "train": "fit task heads on the configured site's training split",
    "eval": "score trained heads on the in-distribution test split",
    "transfer": "score source-trained heads on another site's test split",
    "fewshot": "adapt a transferred head with a handful of labeled windows",
    "privacy": "probe representations for demographic leakage",
    "tokens": "compare token budgets of summaries and serializations",
    "ranks": "rank methods on the published-results fixture tables",
    "report": "aggregate metrics into a report with figures",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="r2v",
        description="portable clinical time-series representations: "
        "summarize-then-embed pipeline and grid baselines",
    )
    sub = parser.add_subparsers(dest="stage", required=True, metavar="stage")
    for stage in STAGES:
        p = sub.add_parser(stage, help=_STAGE_HELP[stage])
        p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config leaf by dotted path, e.g. embed.dim=128",
        )
        p.add_argument(
            "--force",
            action="store_true",
            help="proceed despite config-digest mismatches with existing artifacts",
        )
        p.add_argument("--out", required=True, help="run directory for artifacts")
        if stage in ("transfer", "fewshot"):
            p.add_argument(
                "--source",
                default=None,
                help="run directory holding the trained heads (default: --out)",
            )
            p.add_argument(
                "--target",
                default=None,
                help="run directory holding the target site's artifacts (default: --out)",
            )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.overrides, args.seed)
        written = run_stage(
            args.stage,
            cfg,
            args.out,
            force=args.force,
            source_dir=getattr(args, "source", None),
            target_dir=getattr(args, "target", None),
        )
    except ValidationError as e:
        print(f"r2v {args.stage}: {e}", file=sys.stderr)
        return 2
    except BackendError as e:
        print(f"r2v {args.stage}: backend failure: {e}", file=sys.stderr)
        return 3
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
