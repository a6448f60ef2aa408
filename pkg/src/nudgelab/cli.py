"""Command-line entry point: ``nudgelab {simulate,nudge,analyze,report}``.

Exit codes: 0 success, 1 I/O failure, 2 validation error, 3 missing upstream files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .trial_sim import ConfigError

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_DEPENDENCY = 0, 1, 2, 3

logger = logging.getLogger("nudgelab")


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=_seed, help="overrides the config seed")
    common.add_argument("--out", type=Path, help="run directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nudgelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a trial panel and initial profiles")
    n = sub.add_parser("nudge", parents=[common], help="generate one round of nudge bundles")
    n.add_argument("--round", type=int, required=True, dest="round_")
    sub.add_parser("analyze", parents=[common], help="compute all effect tables")
    sub.add_parser("report", parents=[common], help="print a summary of an analyzed run")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # imported here so argument errors stay fast
    from .analysis import render_report, run_analyze
    from .pipeline import DependencyError, run_nudge, run_simulate

    try:
        cfg = load_config(args.config, seed=args.seed, out=str(args.out) if args.out else None)
        out = Path(cfg.out)
        if args.command == "simulate":
            res = run_simulate(cfg, out)
            print(res["report"])
            print(f"wrote {res['n']} participants to {out}")
        elif args.command == "nudge":
            bundles = run_nudge(cfg, out, args.round_)
            print(f"wrote {len(bundles)} bundles for round {args.round_} to {out}")
        elif args.command == "analyze":
            manifest = run_analyze(cfg, out)
            for name, status in manifest["analyses"].items():
                print(f"{name:<13} {status}")
        elif args.command == "report":
            text = render_report(out)
            (out / "analysis" / "report.txt").write_text(text)
            print(text, end="")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
