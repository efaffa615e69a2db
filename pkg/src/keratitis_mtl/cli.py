"""Command-line entry point: ``keratitis-mtl <stage> [options]``.

Exit codes: 0 success, 1 validation or stage-dependency error, 2 I/O error.
Log verbosity comes from the KERATITIS_MTL_LOG environment variable
(DEBUG, INFO, WARNING, ...; default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .core.types import ValidationError
from .pipeline import STAGES, load_config, run_all

LOG_ENV = "KERATITIS_MTL_LOG"
EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _rounds(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="keratitis-mtl",
        description="Multitask keratitis-etiology pipeline: synth, split, train, predict, eval, stats, report.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--workdir", help="directory for all stage artifacts")
    common.add_argument("--seed", type=int, help="master seed (overrides section seeds)")
    common.add_argument("--rounds", type=_rounds, help="comma-separated round indices, e.g. 0,1,2")
    common.add_argument("--variant", choices=("ST", "Mv1", "Mv2", "Sex", "Age"),
                        help="head variant (ST trains one model per infection)")
    common.add_argument("--clinical-loss", type=_bool, metavar="BOOL",
                        help="use the cost-weighted clinical loss")
    common.add_argument("--adaptive-threshold", type=_bool, metavar="BOOL",
                        help="fit Youden thresholds on each round's validation split")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(STAGES) + ["run"]:
        help_text = "all stages in order" if name == "run" else f"run the {name} stage"
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()
    overrides = {
        "workdir": args.workdir,
        "rounds": args.rounds,
        "clinical_loss": args.clinical_loss,
        "adaptive_threshold": args.adaptive_threshold,
        "model": {"variant": args.variant} if args.variant else None,
    }
    try:
        cfg = load_config(args.config, seed=args.seed, **overrides)
        if args.command == "run":
            out = run_all(cfg)
        else:
            out = STAGES[args.command](cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if isinstance(out, list):
        for p in out:
            print(p)
    else:
        print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
