import argparse
import logging
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pathlib import Path
from typing import List, Optional

import torch

from config.log import configure_logging
from config.runtime import config as runtime_config
from network.checkpoint import CheckpointService
from routers import data, evaluation, training
from shared.errors import NumericalError, WorkbenchError
from shared.router import common_parser

logger = logging.getLogger(__name__)

# Read version from pyproject.toml
with open(Path(__file__).parent / "pyproject.toml", "rb") as f:
    pyproject = tomllib.load(f)
    version = pyproject["project"]["version"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="citytransfer",
        description="Correlation-weighted meta-learning for next-POI recommendation across cities"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {version}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    parents = [common_parser()]
    data.router.mount(subparsers, parents)
    training.router.mount(subparsers, parents)
    evaluation.router.mount(subparsers, parents)
    return parser


def _save_last_state(error: NumericalError, args: argparse.Namespace) -> None:
    out = Path(args.out or runtime_config.default_out_dir) / "stages" / "failed"
    CheckpointService.save(error.last_state, out, {"iteration": error.iteration, "detail": error.detail})
    logger.error(f"Last finite state saved to {out}")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; usage errors are exit code 1 here
        return 0 if e.code == 0 else 1
    configure_logging(args.log_level)
    torch.set_num_threads(runtime_config.torch_threads)
    try:
        return args.handler(args) or 0
    except NumericalError as e:
        logger.error(e.detail)
        if e.last_state is not None:
            _save_last_state(e, args)
        return e.exit_code
    except WorkbenchError as e:
        logger.error(e.detail)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
