# dicp_experiment.py
import argparse
import logging
import sys
from typing import List, Optional

from rich.console import Console
from rich.logging import RichHandler

from dicp_components import __version__, get_available_commands, get_component
from dicp_components.config import load_json_document
from dicp_components.errors import DICPError
from dicp_components.experiment import summary_table

logger = logging.getLogger("dicp")

# --seed is mandatory for these subcommands
SEEDED_COMMANDS = ("eval", "train-mask")


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=verbose)],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dicp",
        description="Differentiable weighted ICP, radar point extraction and mask training",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    for command in get_available_commands():
        component = get_component(command, {})
        sub = subparsers.add_parser(command, help=component.__doc__)
        sub.add_argument("--config", help="JSON configuration document")
        sub.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        sub.add_argument(
            "--seed",
            type=int,
            required=command in SEEDED_COMMANDS,
            default=0,
            help="random seed",
        )
        component.add_arguments(sub)
    return parser


def run(argv: Optional[List[str]] = None, console: Optional[Console] = None) -> int:
    """Parse arguments, dispatch to the component and map errors to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse reports usage errors with status 2, same as a config error
        return int(e.code or 0)

    setup_logging(args.verbose)
    console = console or Console()
    try:
        settings = load_json_document(args.config)
        component = get_component(args.command, settings)
        logger.debug("Running %s with settings %s", args.command, settings)
        result = component.run(args)
        if args.command == "eval":
            console.print(summary_table(result))
        return 0
    except KeyboardInterrupt:
        console.print("\n\nOperation cancelled by user.")
        return 1
    except DICPError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except Exception as e:
        logger.exception("Unexpected error: %s", e)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
