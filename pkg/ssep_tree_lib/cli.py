import argparse
import asyncio
import logging
import sys
from pathlib import Path

import yaml
from pydantic import ValidationError

from .config import ExperimentConfig, RuntimeSettings
from .runner import SUBCOMMANDS, ExperimentRunner
from .utils import CapExceededError

logger = logging.getLogger("ssep_tree_lib")

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_CAP = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssep-tree",
        description="simulate and verify the symmetric exclusion process on regular trees",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("config", nargs="?", type=Path, help="experiment YAML; defaults apply when omitted")
    parser.add_argument("--output-dir", type=Path, help="overrides SSEP_OUTPUT_DIR")
    parser.add_argument("--workers", type=int, help="overrides SSEP_WORKERS")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)


async def run(args: argparse.Namespace) -> int:
    settings = RuntimeSettings()
    config = (
        await ExperimentConfig.async_from_file(args.config)
        if args.config is not None
        else ExperimentConfig()
    )
    workers = args.workers if args.workers is not None else settings.workers
    if workers < 1:
        raise ValueError(f"workers must be at least 1, got {workers}")
    runner = ExperimentRunner(config, args.output_dir or settings.output_dir, workers)
    code = await runner.run(args.subcommand)
    for line in runner.lines:
        print(line)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return asyncio.run(run(args))
    except ValidationError as e:
        print(f"invalid configuration:\n{e}", file=sys.stderr)
        return EXIT_CONFIG
    except yaml.YAMLError as e:
        print(f"malformed configuration file:\n{e}", file=sys.stderr)
        return EXIT_CONFIG
    except CapExceededError as e:
        print(f"state space cap exceeded: {e}", file=sys.stderr)
        return EXIT_CAP
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
