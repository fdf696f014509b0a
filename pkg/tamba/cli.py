"""Command-line entry point: ``tamba generate|train|evaluate|ablate|benchmark``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from tamba.config import Config
from tamba.errors import NumericError, TambaError
from tamba.harness import DEFAULT_LENGTHS, MIN_REPETITIONS, Harness
from tamba.models.config import RunConfig
from tamba.version import qualified_version

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="Override the configured seed")
    common.add_argument("--out", default="out", help="Output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="tamba", description="Trajectory prediction harness")
    parser.add_argument("--version", action="version", version=qualified_version())
    commands = parser.add_subparsers(dest="command", required=True)

    generate = commands.add_parser("generate", parents=[common], help="Write synthetic scenarios")
    generate.add_argument("--n", type=int, help="Number of scenarios")

    train = commands.add_parser(
        "train", parents=[common], help="Train and keep the best checkpoint"
    )
    train.add_argument("--data", help="Scenario directory used instead of the generator")

    evaluate = commands.add_parser("evaluate", parents=[common], help="Score a checkpoint")
    evaluate.add_argument("--checkpoint", help="Checkpoint file, defaults to <out>/checkpoint.ckpt")
    evaluate.add_argument("--data", help="Scenario directory used instead of the generator")

    commands.add_parser("ablate", parents=[common], help="Block kind by joint encoding grid")

    benchmark = commands.add_parser("benchmark", parents=[common], help="Sequence-length scaling")
    benchmark.add_argument("--lengths", type=int, nargs="+", default=list(DEFAULT_LENGTHS))
    benchmark.add_argument("--repetitions", type=int, default=MIN_REPETITIONS)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    run = RunConfig.from_file(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run = run.model_copy(update={"seed": args.seed})
    data_dir = getattr(args, "data", None)
    if data_dir is not None and args.command == "train":
        run = run.model_copy(update={"data": run.data.model_copy(update={"directory": data_dir})})
    return run


def _dispatch(args: argparse.Namespace) -> None:
    run = _run_config(args)
    harness = Harness(run, Config(args.out, profile=run.profile))
    if args.command == "generate":
        harness.generate(n=args.n)
    elif args.command == "train":
        summary = harness.train()
        logger.info(
            "Best validation minADE %.4f, checkpoint %s", summary.best_metric, summary.checkpoint
        )
    elif args.command == "evaluate":
        harness.evaluate(checkpoint=args.checkpoint, data=args.data)
    elif args.command == "ablate":
        logger.info("Ablation table written to %s", harness.ablate())
    else:
        result = harness.benchmark_scaling(lengths=args.lengths, repetitions=args.repetitions)
        logger.info("Benchmark written to %s, slopes %s", result.path, result.slopes)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    try:
        _dispatch(args)
    except NumericError as exc:
        logger.error("%s", exc)
        return EXIT_NUMERIC
    except (TambaError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
